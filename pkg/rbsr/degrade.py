"""
This module contains the forward simulation of the degradation model y = (x * k) subsampled by s, plus noise.
"""

import dataclasses
import enum
import logging
import math
import typing

import annotated_types
import numpy as np
import pydantic
import scipy.ndimage

from .imageio import ImageTensor
from .resample import Boundary
from .utils import RbsrException

logger = logging.getLogger("rbsr.degrade")

_NDIMAGE_MODES = {Boundary.REFLECT: "mirror", Boundary.CLAMP: "nearest"}


class KernelException(RbsrException):
    pass


class ImageTooSmallException(RbsrException):
    pass


class Phase(str, enum.Enum):
    TOPLEFT = "topleft"
    CENTERED = "centered"

    def offset(self, scale: int) -> int:
        return scale // 2 if self == Phase.CENTERED else 0


@dataclasses.dataclass(frozen=True, eq=False)
class BlurKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise KernelException(f"kernel must be square with odd size, got shape {taps.shape}")
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    def normalize(self) -> "BlurKernel":
        total = self.taps.sum()
        if total == 0:
            raise KernelException("cannot normalize a kernel whose taps sum to zero")
        return BlurKernel(self.taps / total)

    def to_text(self) -> str:
        rows = [" ".join(f"{v:.10g}" for v in row) for row in self.taps]
        return f"{self.size}\n" + "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BlurKernel":
        """
        Parse the kernel text format: first token the size, then size*size reals, row-major.
        Lines starting with '#' are ignored.
        """
        tokens = [t for line in text.splitlines() if not line.lstrip().startswith("#") for t in line.split()]
        if not tokens:
            raise KernelException("empty kernel file")
        try:
            size = int(tokens[0])
            values = [float(t) for t in tokens[1:]]
        except ValueError as e:
            raise KernelException(f"invalid kernel text: {e}") from e
        if len(values) != size * size:
            raise KernelException(f"kernel of size {size} needs {size * size} values, got {len(values)}")
        return cls(np.array(values).reshape(size, size))


def _check_size(size: int):
    if size < 1 or size % 2 == 0:
        raise KernelException(f"kernel size must be odd and positive, got {size}")


def make_gaussian_kernel(sigma: float, size: int) -> BlurKernel:
    _check_size(size)
    if sigma <= 0:
        raise KernelException(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - size // 2
    dx, dy = np.meshgrid(r, r)
    return BlurKernel(np.exp(-(dx**2 + dy**2) / (2.0 * sigma**2))).normalize()


def make_anisotropic_gaussian_kernel(sigma_x: float, sigma_y: float, theta: float, size: int) -> BlurKernel:
    """
    Gaussian with principal deviations (sigma_x, sigma_y) rotated by `theta` radians.
    """
    _check_size(size)
    if sigma_x <= 0 or sigma_y <= 0:
        raise KernelException(f"sigmas must be positive, got {sigma_x}, {sigma_y}")
    r = np.arange(size, dtype=np.float64) - size // 2
    dx, dy = np.meshgrid(r, r)
    cos, sin = math.cos(theta), math.sin(theta)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    return BlurKernel(np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))).normalize()


def parse_kernel(spec: str) -> BlurKernel:
    """
    `gaussian:SIGMA:SIZE`, `aniso:SX:SY:THETA:SIZE`, or a path to a kernel text file.
    """
    parts = spec.split(":")
    try:
        if parts[0] == "gaussian" and len(parts) == 3:
            return make_gaussian_kernel(float(parts[1]), int(parts[2]))
        if parts[0] == "aniso" and len(parts) == 5:
            return make_anisotropic_gaussian_kernel(float(parts[1]), float(parts[2]), float(parts[3]), int(parts[4]))
    except ValueError as e:
        raise KernelException(f"invalid kernel spec {spec!r}: {e}") from e
    try:
        with open(spec, "r") as file:
            return BlurKernel.from_text(file.read())
    except OSError as e:
        raise KernelException(f"kernel spec {spec!r} is neither a generator nor a readable file") from e


class DegradationParams(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    kernel: BlurKernel
    scale: typing.Annotated[int, annotated_types.Ge(1)] = 4
    noise_sigma: typing.Annotated[float, annotated_types.Ge(0)] = 0.0
    seed: int = 0
    boundary: Boundary = Boundary.REFLECT
    phase: Phase = Phase.CENTERED


def convolve2d(image: ImageTensor, kernel: BlurKernel, boundary: Boundary = Boundary.REFLECT) -> ImageTensor:
    """
    True convolution (kernel flipped), same-size output, applied per channel.
    """
    mode = _NDIMAGE_MODES[Boundary(boundary)]
    source = np.asarray(image, dtype=np.float64)
    out = np.stack([scipy.ndimage.convolve(channel, kernel.taps, mode=mode) for channel in source])
    return out.astype(image.dtype)


def subsample(image: ImageTensor, s: int, phase: Phase = Phase.CENTERED) -> ImageTensor:
    _, height, width = image.shape
    if height < s or width < s:
        raise ImageTooSmallException(f"image {height}x{width} smaller than subsampling factor {s}")
    offset = Phase(phase).offset(s)
    out_h, out_w = height // s, width // s
    return np.ascontiguousarray(image[:, offset : offset + s * out_h : s, offset : offset + s * out_w : s])


def gaussian_noise(shape: typing.Tuple[int, ...], sigma: float, seed: int) -> np.ndarray:
    """
    Counter-based (Philox) noise: the sample at flat index i depends only on (seed, i).
    """
    generator = np.random.Generator(np.random.Philox(key=seed % 2**64))
    return sigma * generator.standard_normal(int(np.prod(shape))).reshape(shape)


def degrade(image: ImageTensor, params: DegradationParams) -> ImageTensor:
    """
    Blur, subsample and add i.i.d. Gaussian noise. No clamping is applied.
    """
    blurred = convolve2d(image, params.kernel, params.boundary)
    low = subsample(blurred, params.scale, params.phase)
    if params.noise_sigma > 0:
        low = (low + gaussian_noise(low.shape, params.noise_sigma, params.seed)).astype(image.dtype)
    logger.debug(f"Degraded {image.shape} -> {low.shape} (s={params.scale}, noise={params.noise_sigma})")
    return low
