"""
Full-reference quality metrics: PSNR and SSIM, and a CSV report over (output, reference) pairs.
"""

import csv
import dataclasses
import io
import logging
import math
import os
import typing

import annotated_types
import numpy as np
import pydantic
import scipy.signal

from . import config, imageio
from .nn.tensor import ShapeMismatchException
from .utils import RbsrException, parallel_map

logger = logging.getLogger("rbsr.metrics")

REPORT_HEADER = ["name", "psnr", "ssim", "error"]


class ImageTooSmallException(RbsrException):
    pass


class SsimConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    window: typing.Annotated[int, annotated_types.Ge(1)] = config.SSIM_WINDOW
    window_sigma: typing.Annotated[float, annotated_types.Gt(0)] = config.SSIM_SIGMA
    k1: typing.Annotated[float, annotated_types.Gt(0)] = 0.01
    k2: typing.Annotated[float, annotated_types.Gt(0)] = 0.03
    peak: typing.Annotated[float, annotated_types.Gt(0)] = 1.0

    @pydantic.field_validator("window")
    @classmethod
    def ensure_odd(cls, window: int) -> int:
        if window % 2 == 0:
            raise ValueError(f"SSIM window must be odd, got {window}")
        return window


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchException(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """
    Returns:
        float: 10 log10(peak^2 / MSE), or `config.PSNR_INF` for identical images.
    """
    _check_shapes(a, b)
    mse = np.mean(np.square(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
    if mse == 0:
        return config.PSNR_INF
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    def filt(x):
        return scipy.signal.convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(a: np.ndarray, b: np.ndarray, ssim_config: SsimConfig = SsimConfig()) -> float:
    """
    Structural similarity with a Gaussian window over the valid region, computed per channel
    and averaged over channels. Accepts (c, h, w) or (h, w) images.

    Raises:
        ShapeMismatchException: if the shapes differ.
        ImageTooSmallException: if either spatial dimension is below the window size.
    """
    _check_shapes(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[1:]) < ssim_config.window:
        raise ImageTooSmallException(f"image {a.shape[1:]} smaller than SSIM window {ssim_config.window}")
    window = gaussian_window(ssim_config.window, ssim_config.window_sigma)
    c1 = (ssim_config.k1 * ssim_config.peak) ** 2
    c2 = (ssim_config.k2 * ssim_config.peak) ** 2
    score = np.mean([_ssim_channel(ca, cb, window, c1, c2) for ca, cb in zip(a, b)])
    return float(np.clip(score, -1.0, 1.0))


@dataclasses.dataclass
class PairResult:
    name: str
    psnr: typing.Optional[float] = None
    ssim: typing.Optional[float] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclasses.dataclass
class EvaluationReport:
    rows: typing.List[PairResult]

    @property
    def mean(self) -> typing.Optional[PairResult]:
        if not self.rows:
            return None
        valid = [row for row in self.rows if row.ok]
        if not valid:
            return PairResult("mean", error="no valid pairs")
        return PairResult(
            "mean",
            psnr=float(np.mean([row.psnr for row in valid])),
            ssim=float(np.mean([row.ssim for row in valid])),
        )

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        rows = self.rows + ([self.mean] if self.rows else [])
        for row in rows:
            writer.writerow([row.name, format_score(row.psnr), format_score(row.ssim), row.error])
        return buffer.getvalue()

    def write(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as file:
            file.write(self.to_csv())


def format_score(value: typing.Optional[float]) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def read_pair_list(path: str) -> typing.List[typing.Tuple[str, str]]:
    """
    Read a tab-separated `output_path\\treference_path` list; relative paths resolve against the list's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise RbsrException(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            pairs.append(tuple(os.path.join(base, field) for field in fields))
    return pairs


def evaluate_pairs(
    pairs: typing.Sequence[typing.Tuple[str, str]], peak: float = 1.0, ssim_config: SsimConfig = SsimConfig()
) -> EvaluationReport:
    """
    Score every (output, reference) pair. A pair that fails to decode or differs in shape is
    reported in its row and left out of the mean.
    """
    ssim_config = ssim_config.model_copy(update={"peak": peak})

    def score(pair: typing.Tuple[str, str]) -> PairResult:
        output_path, reference_path = pair
        name = os.path.basename(output_path)
        try:
            output = imageio.read_image(output_path)
            reference = imageio.read_image(reference_path)
            return PairResult(name, psnr(output, reference, peak), ssim(output, reference, ssim_config))
        except (RbsrException, OSError) as e:
            logger.warning(f"Could not evaluate {output_path}: {e}")
            return PairResult(name, error=str(e) or type(e).__name__)

    return EvaluationReport(parallel_map(score, list(pairs)))
