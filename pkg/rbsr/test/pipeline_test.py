import os

import numpy as np
import pytest

import rbsr
from rbsr.models import GeneratorConfig, SRConfig
from rbsr.pipeline import Comparison, PipelineBundle, compare_methods, infer, montage, run_tiled


def _bundle(tile: int = 0, overlap: int = 0) -> PipelineBundle:
    return PipelineBundle(
        rbsr.build_lookalike_generator(GeneratorConfig(n_res_blocks=1, channels=4), seed=1),
        rbsr.build_sr_generator(SRConfig(n_res_blocks=1, channels=4), seed=2),
        tile=tile,
        tile_overlap=overlap,
    )


def _baseline():
    return rbsr.build_e2e_baseline(SRConfig(n_res_blocks=1, channels=4), seed=3)


def _lr(h: int = 12, w: int = 10, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).random((3, h, w)).astype(np.float32)


def test_infer_shapes():
    transformed, sr = infer(_bundle(), _lr(50, 60))
    assert transformed.shape == (3, 50, 60)
    assert sr.shape == (3, 200, 240)


def test_infer_rejects_small_input():
    with pytest.raises(rbsr.pipeline.PipelineException):
        infer(_bundle(), _lr(7, 20))
    with pytest.raises(rbsr.pipeline.PipelineException):
        infer(_bundle(), _lr()[0])


def test_bundle_validation_and_freezing():
    bundle = _bundle()
    assert bundle.lookalike.frozen and bundle.sr.frozen
    with pytest.raises(rbsr.pipeline.PipelineException):
        _bundle(tile=16, overlap=16)
    with pytest.raises(rbsr.pipeline.PipelineException):
        _bundle(tile=-1)


def test_tile_starts_cover_image():
    assert rbsr.pipeline._tile_starts(64, 32, 8) == [0, 24, 32]
    assert rbsr.pipeline._tile_starts(20, 32, 8) == [0]
    assert rbsr.pipeline._tile_starts(64, 32, 0) == [0, 32]


def test_tiled_inference_matches_whole_image():
    lr = _lr(64, 64, seed=1)
    whole = infer(_bundle(), lr)
    tiled = infer(_bundle(tile=32, overlap=8), lr)
    for a, b in zip(whole, tiled):
        assert a.shape == b.shape
        assert np.max(np.abs(a - b)) < 1e-5


def test_run_tiled_identity_scale():
    model = rbsr.build_lookalike_generator(GeneratorConfig(n_res_blocks=1, channels=4), seed=4)
    image = _lr(40, 36, seed=2)
    assert np.allclose(run_tiled(model, image, 1, 16, 6), run_tiled(model, image, 1), atol=1e-5)


def test_montage():
    a = np.zeros((3, 4, 5), np.float32)
    b = np.zeros((3, 6, 2), np.float32)
    canvas = montage([a, b])
    assert canvas.shape == (3, 6, 5 + 4 + 2)
    assert np.all(canvas[:, :, 5:9] == 1)
    assert np.all(canvas[:, 4:, :5] == 1)
    assert np.all(canvas[:, :, 9:] == 0)


def test_compare_without_reference(tmp_path):
    lr = _lr(10, 12)
    comparison = compare_methods(lr, None, _bundle(), _baseline(), outdir=str(tmp_path))
    assert comparison.scores is None
    assert list(comparison.outputs) == ["bicubic", "baseline", "two_step"]
    assert all(out.shape == (3, 40, 48) for out in comparison.outputs.values())
    assert comparison.to_csv() == "method,output\nbicubic,bicubic.ppm\nbaseline,baseline.ppm\ntwo_step,two_step.ppm\n"
    for name in ("bicubic.ppm", "baseline.ppm", "two_step.ppm", "transformed.ppm", "montage.ppm", "report.csv"):
        assert os.path.isfile(tmp_path / name)
    assert rbsr.read_image(str(tmp_path / "montage.ppm")).shape == (3, 40, 3 * 48 + 2 * 4)


def test_compare_with_reference():
    lr = _lr(12, 12, seed=5)
    hr = rbsr.upsample_bicubic_x4(lr)
    comparison = compare_methods(lr, hr, _bundle(), _baseline())
    assert set(comparison.scores) == {"bicubic", "baseline", "two_step"}
    assert comparison.scores["bicubic"][0] == np.inf
    lines = comparison.to_csv().splitlines()
    assert lines[0] == "method,psnr,ssim"
    assert lines[1].startswith("bicubic,inf,1.000000")
    assert len(lines) == 4


def test_compare_rejects_mismatched_reference():
    with pytest.raises(rbsr.nn.ShapeMismatchException):
        compare_methods(_lr(12, 12), np.zeros((3, 40, 48), np.float32), _bundle(), _baseline())


def test_comparison_csv_formats_scores():
    comparison = Comparison(np.zeros((3, 8, 8)), {}, {"two_step": (27.5, 0.81234567)})
    assert comparison.to_csv() == "method,psnr,ssim\ntwo_step,27.500000,0.812346\n"
