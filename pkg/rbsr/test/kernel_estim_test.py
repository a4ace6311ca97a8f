import numpy as np
import pytest

import rbsr
from rbsr.degrade import DegradationParams, degrade, make_gaussian_kernel, subsample
from rbsr.kernel_estim import (
    EstimationConfig,
    design_matrix,
    estimate_kernel,
    estimate_patchwise,
    format_kernel_grid,
    kernel_grid_render,
)


def _pair(size: int, sigma: float, ksize: int = 13, noise: float = 0.0, seed: int = 0):
    hr = np.random.default_rng(seed).random((1, size, size))
    truth = make_gaussian_kernel(sigma, ksize)
    lr = degrade(hr, DegradationParams(kernel=truth, noise_sigma=noise, seed=seed))
    return hr, lr, truth


def _relative_error(estimated, truth) -> float:
    return np.linalg.norm(estimated.kernel.taps - truth.taps) / np.linalg.norm(truth.taps)


@pytest.mark.parametrize("sigma", [1.0, 1.5, 2.0])
def test_recovers_gaussian(sigma):
    hr, lr, truth = _pair(192, sigma)
    assert _relative_error(estimate_kernel(hr, lr, EstimationConfig()), truth) < 0.05


def test_recovers_gaussian_under_noise():
    hr, lr, truth = _pair(192, 1.5, noise=0.01, seed=11)
    assert _relative_error(estimate_kernel(hr, lr, EstimationConfig()), truth) < 0.15


def test_recovers_delta():
    hr = np.random.default_rng(1).random((1, 96, 96))
    taps = estimate_kernel(hr, subsample(hr, 4), EstimationConfig()).kernel.taps
    center = taps[6, 6]
    assert center > 0.95
    assert np.abs(taps).sum() - abs(center) < 0.05


def test_ridge_limit_shrinks_kernel():
    hr = np.random.default_rng(2).random((1, 64, 64)) - 0.5
    lr = degrade(hr, DegradationParams(kernel=make_gaussian_kernel(1.5, 13)))
    estimation = EstimationConfig(lam=1e6, sum_to_one=False)
    assert np.linalg.norm(estimate_kernel(hr, lr, estimation).kernel.taps) < 1e-3


def _brute_force_design(hr: np.ndarray, lr: np.ndarray, ksize: int, scale: int):
    r = ksize // 2
    rows, targets = [], []
    for i in range(lr.shape[0]):
        for j in range(lr.shape[1]):
            ci, cj = scale // 2 + scale * i, scale // 2 + scale * j
            if ci - r < 0 or cj - r < 0 or ci + r >= hr.shape[0] or cj + r >= hr.shape[1]:
                continue
            rows.append([hr[ci + r - u, cj + r - v] for u in range(ksize) for v in range(ksize)])
            targets.append(lr[i, j])
    return np.array(rows), np.array(targets)


def test_matches_dense_least_squares():
    hr, lr, _ = _pair(48, 1.0, ksize=7, seed=3)
    matrix, targets = design_matrix(hr[0], lr[0], 7, 4)
    oracle_matrix, oracle_targets = _brute_force_design(hr[0], lr[0], 7, 4)
    assert np.array_equal(matrix, oracle_matrix)
    assert np.array_equal(targets, oracle_targets)

    lam = 1e-3
    estimation = EstimationConfig(kernel_size=7, lam=lam, sum_to_one=False, patch_hr=48)
    augmented = np.vstack([oracle_matrix, np.sqrt(lam) * np.eye(49)])
    expected, *_ = np.linalg.lstsq(augmented, np.concatenate([oracle_targets, np.zeros(49)]), rcond=None)
    estimated = estimate_kernel(hr, lr, estimation).kernel.taps.ravel()
    assert np.max(np.abs(estimated - expected)) < 1e-6


def test_residual_grows_with_lambda():
    hr, lr, _ = _pair(96, 1.5, noise=0.01, seed=4)
    residuals = [
        estimate_kernel(hr, lr, EstimationConfig(lam=lam, sum_to_one=False)).residual_rms
        for lam in (1e-4, 1e-2, 1.0, 1e2)
    ]
    assert all(b >= a - 1e-12 for a, b in zip(residuals, residuals[1:]))


def test_offset_invariance():
    hr, lr, _ = _pair(96, 2.0, seed=5)
    base = estimate_kernel(hr, lr, EstimationConfig()).kernel.taps
    shifted = estimate_kernel(hr + 0.3, lr + 0.3, EstimationConfig()).kernel.taps
    assert np.allclose(base, shifted, atol=1e-8)


def test_conjugate_gradient_path():
    hr, lr, truth = _pair(256, 2.0, ksize=23, seed=6)
    estimated = estimate_kernel(hr, lr, EstimationConfig(kernel_size=23, patch_hr=256))
    assert estimated.iterations > 0
    assert _relative_error(estimated, truth) < 0.05
    with pytest.raises(rbsr.kernel_estim.SolverNonConvergenceException) as info:
        estimate_kernel(hr, lr, EstimationConfig(kernel_size=23, patch_hr=256, solver_max_iter=1))
    assert info.value.residual > 0


def test_estimation_errors():
    hr = np.random.default_rng(7).random((1, 24, 24))
    with pytest.raises(rbsr.kernel_estim.UnderdeterminedException):
        estimate_kernel(hr, subsample(hr, 4), EstimationConfig())
    with pytest.raises(rbsr.kernel_estim.GridGeometryException):
        estimate_kernel(hr, np.zeros((1, 5, 6)), EstimationConfig())
    with pytest.raises(ValueError):
        EstimationConfig(kernel_size=12)
    with pytest.raises(ValueError):
        EstimationConfig(patch_hr=40)


def test_patchwise_uniform_degradation():
    hr, lr, truth = _pair(384, 1.5, seed=8)
    grid = estimate_patchwise(hr, lr, EstimationConfig(grid=(2, 2)))
    kernels = [k.kernel.taps for row in grid for k in row]
    assert len(grid) == 2 and len(grid[0]) == 2
    norm = np.linalg.norm(truth.taps)
    for a in kernels:
        for b in kernels:
            assert np.linalg.norm(a - b) < 0.05 * norm


def test_patchwise_single_cell_matches_direct():
    hr, lr, _ = _pair(192, 1.5, seed=9)
    grid = estimate_patchwise(hr, lr, EstimationConfig(grid=(1, 1)))
    direct = estimate_kernel(hr, lr, EstimationConfig())
    assert np.allclose(grid[0][0].kernel.taps, direct.kernel.taps, atol=1e-12)


def test_patchwise_bicubic_beats_delta():
    hr = np.random.default_rng(10).random((1, 384, 384))
    lr = rbsr.downsample_bicubic_x4(hr)
    grid = estimate_patchwise(hr, lr, EstimationConfig(grid=(2, 2)))
    for i, row in enumerate(grid):
        for j, estimated in enumerate(row):
            hr_tile = hr[0, 192 * i : 192 * (i + 1), 192 * j : 192 * (j + 1)]
            lr_tile = lr[0, 48 * i : 48 * (i + 1), 48 * j : 48 * (j + 1)]
            matrix, targets = design_matrix(hr_tile, lr_tile, 13, 4)
            delta_residual = np.sqrt(np.mean((matrix[:, 84] - targets) ** 2))
            assert estimated.residual_rms < delta_residual


def test_patchwise_geometry_errors():
    hr, lr, _ = _pair(96, 1.5)
    with pytest.raises(rbsr.kernel_estim.GridGeometryException):
        estimate_patchwise(hr, lr, EstimationConfig(grid=(4, 4)))
    with pytest.raises(rbsr.kernel_estim.GridGeometryException):
        estimate_patchwise(hr, lr[:, :10], EstimationConfig(grid=(1, 1)))


def test_render_sizes():
    hr, lr, _ = _pair(192, 1.5)
    single = estimate_patchwise(hr, lr, EstimationConfig(grid=(1, 1)))
    assert kernel_grid_render(single).shape == (1, 104 + 4, 104 + 4)

    constant = rbsr.kernel_estim.EstimatedKernel(rbsr.BlurKernel(np.full((13, 13), 1 / 169)), 0.0, 0)
    rendered = kernel_grid_render([[constant] * 3] * 2)
    assert rendered.shape[2] == 3 * (8 * 13) + 4 * 2
    assert rendered.shape[1] == 2 * (8 * 13) + 3 * 2
    assert np.all(rendered[0, 2 : 2 + 104, 2 : 2 + 104] == 0)
    assert np.all(rendered[0, :2] == 1)


def test_format_kernel_grid():
    kernel = rbsr.kernel_estim.EstimatedKernel(rbsr.BlurKernel(np.eye(3) / 3), 0.25, 0)
    text = format_kernel_grid([[kernel, kernel]])
    assert text.startswith("# 0 0 0.25\n3\n")
    assert "# 0 1 0.25\n" in text
    assert np.allclose(rbsr.BlurKernel.from_text(text.split("# 0 1")[0]).taps, np.eye(3) / 3)


def test_patchwise_accepts_rounded_lr_size():
    hr = np.random.default_rng(12).random((3, 127, 127))
    lr = rbsr.resize(hr, rbsr.ResampleSpec.from_scale("1/4"))
    assert lr.shape == (3, 32, 32)
    grid = estimate_patchwise(hr, lr, EstimationConfig(kernel_size=7, patch_hr=128, grid=(1, 1)))
    estimated = grid[0][0]
    assert estimated.kernel.taps.shape == (7, 7)
    assert estimated.kernel.taps.sum() == pytest.approx(1.0)
    assert np.isfinite(estimated.residual_rms)
