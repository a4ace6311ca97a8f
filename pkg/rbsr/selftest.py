"""
Embedded invariant suite run by `rbsr selftest`: small, fast versions of the checks in rbsr/test.
"""

import logging
import math
import time
import typing

import numpy as np

from . import config, degrade, imageio, kernel_estim, losses, metrics, models, resample, trainer
from .nn import checkpoint, functional, gradcheck

logger = logging.getLogger("rbsr.selftest")

GRAD_TOLERANCE = 1e-4


def check_codecs():
    rng = np.random.default_rng(0)
    raw = imageio.RawImage.from_array(rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8))
    assert imageio.decode_ppm(imageio.encode_ppm(raw)) == raw, "PPM round trip"
    tensors = {"a.weight": rng.standard_normal((2, 3, 3, 3)).astype(np.float32), "a.bias": np.zeros(2, np.float32)}
    parsed = checkpoint.checkpoint_parse(checkpoint.checkpoint_bytes(tensors))
    assert list(parsed) == list(tensors), "checkpoint name order"
    assert all(np.array_equal(parsed[k], tensors[k]) for k in tensors), "checkpoint values"


def check_resample():
    for in_size, out_size in ((16, 4), (7, 13), (10, 10)):
        matrix = resample.weight_matrix(in_size, out_size, config.BICUBIC_A, True, resample.Boundary.REFLECT)
        assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-6), "partition of unity"
    constant = np.full((3, 12, 12), 0.37, dtype=np.float32)
    assert np.allclose(resample.resize(constant, resample.ResampleSpec.from_scale("5/3")), 0.37, atol=1e-6)
    image = np.random.default_rng(1).random((3, 9, 11)).astype(np.float32)
    assert np.allclose(resample.resize(image, resample.ResampleSpec.from_scale("1/1")), image, atol=1e-6)


def check_convolutions():
    rng = np.random.default_rng(2)
    image = rng.random((1, 9, 8))
    kernel = degrade.BlurKernel(rng.random((3, 3)))
    padded = np.pad(image[0], 1, mode="reflect")
    flipped = kernel.taps[::-1, ::-1]
    expected = np.array(
        [[np.sum(padded[y : y + 3, x : x + 3] * flipped) for x in range(8)] for y in range(9)]
    )
    assert np.allclose(degrade.convolve2d(image, kernel)[0], expected, atol=1e-6), "degradation convolution"

    x = rng.standard_normal((1, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 6, 5))
    for o in range(3):
        for y in range(6):
            for x0 in range(5):
                expected[0, o, y, x0] = np.sum(xp[0, :, y : y + 3, x0 : x0 + 3] * w[o]) + b[o]
    assert np.allclose(functional.conv2d(x, w, b, 1, 1), expected, atol=1e-6), "network convolution"


def check_kernel_recovery():
    rng = np.random.default_rng(3)
    hr = rng.random((96, 96))
    truth = degrade.make_gaussian_kernel(1.5, 7)
    lr = degrade.degrade(hr[None], degrade.DegradationParams(kernel=truth))[0]
    estimation = kernel_estim.EstimationConfig(kernel_size=7, patch_hr=96, grid=(1, 1))
    estimated = kernel_estim.estimate_kernel(hr, lr, estimation).kernel.taps
    error = np.linalg.norm(estimated - truth.taps) / np.linalg.norm(truth.taps)
    assert error < 0.05, f"kernel relative error {error:.3g}"


def _toy_models() -> typing.List[models.ModelGraph]:
    return [
        models.build_lookalike_generator(models.GeneratorConfig(n_res_blocks=1, channels=4), seed=1),
        models.build_sr_generator(models.SRConfig(n_res_blocks=1, channels=4), seed=2),
        models.build_e2e_baseline(models.SRConfig(n_res_blocks=2, channels=4), seed=3),
        models.build_discriminator(
            models.DiscriminatorConfig(base_channels=4, n_stages=2, dense_width=8, input_size=8), seed=4
        ),
    ]


def check_gradients():
    rng = np.random.default_rng(4)
    x = rng.random((2, 3, 8, 8))
    for model in _toy_models():
        out, _ = model.forward(x.astype(np.float32))
        target = rng.random(out.shape)
        error = gradcheck.finite_diff_check(model, lambda pred: losses.l1_loss(pred, target), x, samples=60)
        assert error < GRAD_TOLERANCE, f"{model.role} gradient error {error:.3g}"


def check_losses():
    x = np.random.default_rng(5).random((1, 3, 8, 8))
    assert losses.l1_loss(x, x)[0] == 0.0
    extractor = losses.FeatureExtractor(models.build_sr_generator(models.SRConfig(n_res_blocks=1, channels=4)))
    assert losses.bicubic_perceptual_loss(x, x, extractor)[0] == 0.0
    assert math.isclose(losses.total_loss(0.1, 0.2, 0.3, losses.LossWeights()), 1.0, abs_tol=1e-12)
    adv = losses.adversarial_losses(np.full(4, 0.5), np.full(4, 0.5))
    assert math.isclose(adv.loss_d, 2 * math.log(2), abs_tol=1e-9)
    assert math.isclose(adv.loss_g, math.log(2), abs_tol=1e-9)


def check_metrics():
    a = np.full((3, 16, 16), 0.5)
    assert math.isclose(metrics.psnr(a, a + 0.1), 20.0, abs_tol=1e-9), "psnr of constant difference"
    b = np.random.default_rng(6).random((3, 16, 16))
    assert abs(metrics.ssim(b, b) - 1.0) < 1e-9, "ssim of identical images"


def check_schedule():
    lookalike = trainer.TrainSchedule()
    sr = trainer.TrainSchedule.for_sr()
    for epoch, expected, schedule in ((0, 1e-4, lookalike), (800, 1e-5, lookalike), (1600, 1e-6, lookalike),
                                      (0, 1e-3, sr), (1000, 1e-4, sr)):
        assert math.isclose(trainer.lr_at_epoch(epoch, schedule), expected, rel_tol=1e-9), f"lr at {epoch}"


GROUPS: typing.List[typing.Tuple[str, typing.Callable[[], None]]] = [
    ("codecs", check_codecs),
    ("resample", check_resample),
    ("convolutions", check_convolutions),
    ("kernel recovery", check_kernel_recovery),
    ("gradients", check_gradients),
    ("losses", check_losses),
    ("metrics", check_metrics),
    ("schedule", check_schedule),
]


def run_selftest(emit: typing.Callable[[str], None] = print) -> bool:
    """
    Run every group, emit one PASS/FAIL line each, and return True when all passed.
    """
    passed = True
    for name, check in GROUPS:
        start = time.perf_counter()
        try:
            check()
            emit(f"PASS  {name} ({time.perf_counter() - start:.2f}s)")
        except Exception as e:
            passed = False
            logger.debug(f"Selftest group {name} failed", exc_info=True)
            emit(f"FAIL  {name}: {type(e).__name__}: {e}")
    return passed
