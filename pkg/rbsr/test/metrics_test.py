import math

import numpy as np
import pytest

import rbsr
from rbsr.metrics import (
    EvaluationReport,
    PairResult,
    SsimConfig,
    evaluate_pairs,
    format_score,
    gaussian_window,
    psnr,
    read_pair_list,
    ssim,
)


def _image(shape=(3, 24, 24), seed=0):
    return np.random.default_rng(seed).random(shape)


def test_psnr():
    a = np.full((3, 8, 8), 0.5)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    b = _image((3, 8, 8))
    assert psnr(255 * a, 255 * b, peak=255.0) == pytest.approx(psnr(a, b))
    with pytest.raises(rbsr.nn.ShapeMismatchException):
        psnr(a, a[:, :4])


def test_psnr_is_symmetric():
    a, b = _image(seed=1), _image(seed=2)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, b, peak=2.0) == psnr(b, a, peak=2.0)


def test_gaussian_window():
    window = gaussian_window(11, 1.5)
    assert window.sum() == pytest.approx(1.0)
    assert np.allclose(window, window.T)
    assert np.allclose(window, window[::-1, ::-1])
    assert window.argmax() == 60


def _ssim_oracle(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    window = gaussian_window(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for y in range(a.shape[0] - size + 1):
        for x in range(a.shape[1] - size + 1):
            pa, pb = a[y : y + size, x : x + size], b[y : y + size, x : x + size]
            mu_a, mu_b = np.sum(window * pa), np.sum(window * pb)
            var_a = np.sum(window * (pa - mu_a) ** 2)
            var_b = np.sum(window * (pb - mu_b) ** 2)
            cov = np.sum(window * (pa - mu_a) * (pb - mu_b))
            scores.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(scores))


def test_ssim_matches_windowed_formula():
    a = _image((14, 13), seed=1)
    b = np.clip(a + 0.2 * _image((14, 13), seed=2) - 0.1, 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-9)


def test_ssim_averages_channels():
    a, b = _image(seed=3), _image(seed=4)
    per_channel = [ssim(a[c], b[c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per_channel))


def test_ssim_identity_and_symmetry():
    a, b = _image(seed=5), _image(seed=6)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert -1.0 <= ssim(a, 1 - a) < 0


def test_quality_drops_with_noise():
    a = _image((3, 32, 32), seed=7)
    noise = np.random.default_rng(8).standard_normal(a.shape)
    levels = [0.01, 0.05, 0.1, 0.2]
    psnrs = [psnr(a, a + s * noise) for s in levels]
    ssims = [ssim(a, a + s * noise) for s in levels]
    assert psnrs == sorted(psnrs, reverse=True)
    assert ssims == sorted(ssims, reverse=True)


def test_ssim_errors():
    with pytest.raises(rbsr.metrics.ImageTooSmallException):
        ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))
    with pytest.raises(rbsr.nn.ShapeMismatchException):
        ssim(np.zeros((3, 12, 12)), np.zeros((3, 12, 13)))
    with pytest.raises(ValueError):
        SsimConfig(window=8)
    assert ssim(np.zeros((3, 7, 7)), np.zeros((3, 7, 7)), SsimConfig(window=7)) == pytest.approx(1.0)


def test_format_score():
    assert format_score(None) == ""
    assert format_score(math.inf) == "inf"
    assert format_score(31.25) == "31.250000"


def test_report_mean_skips_failed_rows():
    report = EvaluationReport(
        [PairResult("a", 30.0, 0.9), PairResult("b", 20.0, 0.7), PairResult("c", error="shape mismatch")]
    )
    mean = report.mean
    assert (mean.psnr, mean.ssim) == pytest.approx((25.0, 0.8))
    lines = report.to_csv().splitlines()
    assert lines[0] == "name,psnr,ssim,error"
    assert lines[3] == "c,,,shape mismatch"
    assert lines[4] == "mean,25.000000,0.800000,"


def test_empty_and_all_failed_reports():
    assert EvaluationReport([]).mean is None
    assert EvaluationReport([]).to_csv() == "name,psnr,ssim,error\n"
    failed = EvaluationReport([PairResult("a", error="missing")])
    assert failed.mean.error == "no valid pairs"


def _write(path, image):
    rbsr.write_image(str(path), image.astype(np.float32))
    return str(path)


def test_evaluate_pairs(tmp_path):
    hr = _image((3, 16, 16), seed=9)
    reference = _write(tmp_path / "hr.ppm", hr)
    same = _write(tmp_path / "same.ppm", hr)
    noisy = _write(tmp_path / "noisy.ppm", np.clip(hr + 0.05, 0, 1))
    small = _write(tmp_path / "small.ppm", hr[:, :8, :8])
    pairs = [(same, reference), (noisy, reference), (small, reference), (str(tmp_path / "missing.ppm"), reference)]
    report = evaluate_pairs(pairs)
    assert [row.name for row in report.rows] == ["same.ppm", "noisy.ppm", "small.ppm", "missing.ppm"]
    assert report.rows[0].psnr == math.inf
    assert report.rows[1].ok and 20 < report.rows[1].psnr < 40
    assert not report.rows[2].ok and not report.rows[3].ok
    assert report.mean.psnr == math.inf
    path = tmp_path / "out" / "report.csv"
    report.write(str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 6
    assert lines[1].startswith("same.ppm,inf,1.000000,")


def test_read_pair_list(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_text("# output reference\nout/a.ppm\thr/a.ppm\n\n")
    assert read_pair_list(str(path)) == [(str(tmp_path / "out/a.ppm"), str(tmp_path / "hr/a.ppm"))]
    path.write_text("a.ppm\n")
    with pytest.raises(rbsr.RbsrException):
        read_pair_list(str(path))
