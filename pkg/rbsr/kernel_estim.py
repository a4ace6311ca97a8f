"""
This module estimates downsampling kernels from aligned HR/LR pairs.

For a patch pair it solves argmin_k ||S(X k) - y||^2 + lambda ||k||^2 through the normal equations,
where X k is the convolution of the HR patch with k and S keeps every s-th sample. Only equations whose
whole support lies inside the HR patch are used.
"""

import dataclasses
import logging
import typing

import annotated_types
import numpy as np
import pydantic
import scipy.linalg
import scipy.sparse.linalg

from . import config
from .degrade import BlurKernel, Phase
from .imageio import ImageTensor
from .utils import RbsrException, parallel_map

logger = logging.getLogger("rbsr.kernel_estim")


class KernelEstimationException(RbsrException):
    pass


class UnderdeterminedException(KernelEstimationException):
    pass


class SolverNonConvergenceException(KernelEstimationException):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class GridGeometryException(KernelEstimationException):
    pass


class EstimationConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    kernel_size: typing.Annotated[int, annotated_types.Ge(1)] = config.KERNEL_SIZE
    lam: typing.Annotated[float, annotated_types.Ge(0)] = pydantic.Field(config.KERNEL_LAMBDA, alias="lambda")
    scale: typing.Annotated[int, annotated_types.Ge(1)] = config.SCALE
    patch_hr: typing.Annotated[int, annotated_types.Ge(1)] = config.KERNEL_PATCH_HR
    grid: typing.Tuple[int, int] = config.KERNEL_GRID
    sum_to_one: bool = True
    solver_tol: typing.Annotated[float, annotated_types.Gt(0)] = config.SOLVER_TOL
    solver_max_iter: typing.Annotated[int, annotated_types.Ge(1)] = config.SOLVER_MAX_ITER
    phase: Phase = Phase.CENTERED

    @pydantic.field_validator("kernel_size")
    @classmethod
    def ensure_odd(cls, size: int) -> int:
        if size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {size}")
        return size

    @pydantic.field_validator("grid")
    @classmethod
    def ensure_grid(cls, grid: typing.Tuple[int, int]) -> typing.Tuple[int, int]:
        if grid[0] < 1 or grid[1] < 1:
            raise ValueError(f"grid must be at least 1x1, got {grid}")
        return grid

    @pydantic.model_validator(mode="after")
    def ensure_enough_equations(self):
        if self.patch_hr < self.scale * self.kernel_size:
            raise ValueError(
                f"patch_hr={self.patch_hr} is smaller than scale*kernel_size={self.scale * self.kernel_size}"
            )
        return self


@dataclasses.dataclass(frozen=True)
class EstimatedKernel:
    kernel: BlurKernel
    residual_rms: float
    iterations: int


KernelGrid = typing.List[typing.List[EstimatedKernel]]


def luminance(image: np.ndarray) -> np.ndarray:
    """
    Average channels of a (c, h, w) tensor; 2-D input is returned as float64.
    """
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=0) if image.ndim == 3 else image


def design_matrix(
    hr: np.ndarray, lr: np.ndarray, kernel_size: int, scale: int, phase: Phase = Phase.CENTERED
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Explicit matrix A of the map k -> S(X k) restricted to valid equations, and the matching targets y.
    """
    radius = kernel_size // 2
    offset = Phase(phase).offset(scale)
    centers_r = offset + scale * np.arange(lr.shape[0])
    centers_c = offset + scale * np.arange(lr.shape[1])
    keep_r = (centers_r - radius >= 0) & (centers_r + radius < hr.shape[0])
    keep_c = (centers_c - radius >= 0) & (centers_c + radius < hr.shape[1])
    windows = np.lib.stride_tricks.sliding_window_view(hr, (kernel_size, kernel_size))
    selected = windows[centers_r[keep_r] - radius][:, centers_c[keep_c] - radius]
    # convolution pairs tap (u, v) with the window flipped in both axes
    matrix = selected[:, :, ::-1, ::-1].reshape(-1, kernel_size * kernel_size)
    targets = lr[np.ix_(keep_r, keep_c)].ravel()
    return matrix, targets


def _solve_normal_equations(
    matrix: np.ndarray, targets: np.ndarray, estimation: EstimationConfig
) -> typing.Tuple[np.ndarray, int]:
    n_unknowns = matrix.shape[1]
    gram = matrix.T @ matrix
    rhs = matrix.T @ targets
    if estimation.kernel_size <= config.DIRECT_SOLVE_MAX_KSIZE:
        try:
            solution = scipy.linalg.solve(gram + estimation.lam * np.eye(n_unknowns), rhs, assume_a="sym")
        except scipy.linalg.LinAlgError as e:
            raise UnderdeterminedException(f"normal equations are singular: {e}") from e
        return solution, 0

    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    operator = scipy.sparse.linalg.LinearOperator(
        (n_unknowns, n_unknowns), matvec=lambda v: gram @ v + estimation.lam * v, dtype=np.float64
    )
    solution, info = scipy.sparse.linalg.cg(
        operator, rhs, rtol=estimation.solver_tol, maxiter=estimation.solver_max_iter, callback=count
    )
    if info != 0:
        residual = float(np.linalg.norm(gram @ solution + estimation.lam * solution - rhs) / np.linalg.norm(rhs))
        raise SolverNonConvergenceException(
            f"conjugate gradient stopped after {iterations} iterations at relative residual {residual:.3g}",
            residual,
        )
    return solution, iterations


def estimate_kernel(hr_patch: ImageTensor, lr_patch: ImageTensor, estimation: EstimationConfig) -> EstimatedKernel:
    """
    Estimate one kernel from an aligned HR/LR patch pair.

    Args:
        hr_patch: (c, H, W) or (H, W) HR patch; channels are averaged.
        lr_patch: matching LR patch of size (H // s, W // s).
        estimation: solver settings.

    Raises:
        UnderdeterminedException: fewer valid equations than kernel taps.
        SolverNonConvergenceException: conjugate gradient did not reach `solver_tol`.
    """
    hr = luminance(hr_patch)
    lr = luminance(lr_patch)
    s = estimation.scale
    if lr.shape != (hr.shape[0] // s, hr.shape[1] // s):
        raise GridGeometryException(f"LR patch {lr.shape} does not match HR patch {hr.shape} at scale {s}")
    if estimation.sum_to_one:
        # with sum(k) = 1 a shared offset cancels, so it is removed before solving
        offset = hr.mean()
        hr, lr = hr - offset, lr - offset
    matrix, targets = design_matrix(hr, lr, estimation.kernel_size, s, estimation.phase)
    n_unknowns = estimation.kernel_size**2
    if matrix.shape[0] < n_unknowns:
        raise UnderdeterminedException(
            f"{matrix.shape[0]} valid equations for {n_unknowns} unknowns; HR patch {hr.shape} too small"
        )
    solution, iterations = _solve_normal_equations(matrix, targets, estimation)
    if estimation.sum_to_one:
        solution = solution + (1.0 - solution.sum()) / solution.size
    residual_rms = float(np.sqrt(np.mean((matrix @ solution - targets) ** 2)))
    logger.debug(f"Estimated kernel from {matrix.shape[0]} equations, residual {residual_rms:.3g}")
    size = estimation.kernel_size
    return EstimatedKernel(BlurKernel(solution.reshape(size, size)), residual_rms, iterations)


def estimate_patchwise(hr: ImageTensor, lr: ImageTensor, estimation: EstimationConfig) -> KernelGrid:
    """
    Split the pair into `estimation.grid` cells and estimate one kernel per cell.

    Each cell uses a centered HR tile of side min(patch_hr, cell side), aligned to the scale.
    """
    hr_l = luminance(hr)
    lr_l = luminance(lr)
    s = estimation.scale
    (hr_h, hr_w), (lr_h, lr_w) = hr_l.shape, lr_l.shape
    if abs(hr_h - s * lr_h) >= s or abs(hr_w - s * lr_w) >= s:
        raise GridGeometryException(f"HR {hr_l.shape} is not {s}x LR {lr_l.shape}")
    # rounding may leave the HR one LR pixel short; keep the extent both images cover
    lr_h, lr_w = min(lr_h, hr_h // s), min(lr_w, hr_w // s)
    hr_l, lr_l = hr_l[: s * lr_h, : s * lr_w], lr_l[:lr_h, :lr_w]
    rows, cols = estimation.grid
    cell_h, cell_w = lr_h // rows, lr_w // cols
    tile_h = min(cell_h, estimation.patch_hr // s)
    tile_w = min(cell_w, estimation.patch_hr // s)
    if tile_h < estimation.kernel_size or tile_w < estimation.kernel_size:
        raise GridGeometryException(
            f"grid {rows}x{cols} leaves {tile_h * s}x{tile_w * s} HR tiles, "
            f"need at least {s * estimation.kernel_size}"
        )

    def run(cell: typing.Tuple[int, int]) -> EstimatedKernel:
        i, j = cell
        y0 = i * cell_h + (cell_h - tile_h) // 2
        x0 = j * cell_w + (cell_w - tile_w) // 2
        hr_tile = hr_l[y0 * s : (y0 + tile_h) * s, x0 * s : (x0 + tile_w) * s]
        lr_tile = lr_l[y0 : y0 + tile_h, x0 : x0 + tile_w]
        return estimate_kernel(hr_tile, lr_tile, estimation)

    cells = [(i, j) for i in range(rows) for j in range(cols)]
    results = parallel_map(run, cells)
    logger.info(f"Estimated {len(results)} kernels on a {rows}x{cols} grid")
    return [results[i * cols : (i + 1) * cols] for i in range(rows)]


def kernel_grid_render(grid: KernelGrid) -> ImageTensor:
    """
    Min-max normalize each kernel, magnify it 8x (nearest neighbor) and tile the grid with 2-pixel
    white separators, borders included. Returns a single-channel image.
    """
    if not grid or not grid[0]:
        raise GridGeometryException("cannot render an empty kernel grid")
    rows, cols = len(grid), len(grid[0])
    size = max(k.kernel.size for row in grid for k in row)
    cell = size * config.RENDER_MAGNIFY
    sep = config.RENDER_SEPARATOR
    canvas = np.ones((rows * cell + (rows + 1) * sep, cols * cell + (cols + 1) * sep), dtype=np.float32)
    for i, row in enumerate(grid):
        for j, estimated in enumerate(row):
            taps = estimated.kernel.taps
            low, high = taps.min(), taps.max()
            normalized = (taps - low) / (high - low) if high > low else np.zeros_like(taps)
            magnified = np.kron(normalized, np.ones((config.RENDER_MAGNIFY, config.RENDER_MAGNIFY)))
            y0 = sep + i * (cell + sep)
            x0 = sep + j * (cell + sep)
            canvas[y0 : y0 + magnified.shape[0], x0 : x0 + magnified.shape[1]] = magnified
    return canvas[None]


def format_kernel_grid(grid: KernelGrid) -> str:
    """
    Text dump: one kernel block per cell, each preceded by `# row col residual_rms`.
    """
    blocks = []
    for i, row in enumerate(grid):
        for j, estimated in enumerate(row):
            blocks.append(f"# {i} {j} {estimated.residual_rms:.6g}\n{estimated.kernel.to_text()}")
    return "".join(blocks)
