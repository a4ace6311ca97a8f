"""
This module contains two-step inference, SR(G(lr)), and the comparison harness against the
end-to-end baseline and plain bicubic upsampling.
"""

import dataclasses
import logging
import os
import typing

import numpy as np

from . import config, imageio, metrics, resample
from .models import ModelGraph
from .nn.tensor import ShapeMismatchException
from .utils import RbsrException, parallel_map

logger = logging.getLogger("rbsr.pipeline")

METHODS = ["bicubic", "baseline", "two_step"]
MONTAGE_GAP = 4


class PipelineException(RbsrException):
    pass


@dataclasses.dataclass
class PipelineBundle:
    """
    Look-alike generator and SR generator, frozen on construction. `tile` = 0 processes whole images.
    """

    lookalike: ModelGraph
    sr: ModelGraph
    tile: int = 0
    tile_overlap: int = 0

    def __post_init__(self):
        if self.tile < 0 or self.tile_overlap < 0:
            raise PipelineException("tile and overlap must be non-negative")
        if self.tile and self.tile_overlap >= self.tile:
            raise PipelineException(f"tile overlap {self.tile_overlap} must be smaller than tile {self.tile}")
        self.lookalike.freeze()
        self.sr.freeze()


def _tile_starts(size: int, tile: int, overlap: int) -> typing.List[int]:
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile, tile - overlap))
    return starts + [size - tile]


def _ramp(length: int, start: int, stop: int, size: int, feather: int) -> np.ndarray:
    """Blend weights over one tile core: linear ramps of width `feather` at inner seams only."""
    t = np.arange(length, dtype=np.float64) + 0.5
    weight = np.ones(length)
    if feather > 0:
        if start > 0:
            weight = np.minimum(weight, t / feather)
        if stop < size:
            weight = np.minimum(weight, (length - t) / feather)
    return weight


def run_tiled(model: ModelGraph, image: np.ndarray, scale: int, tile: int = 0, overlap: int = 0) -> np.ndarray:
    """
    Apply `model` to a (c, h, w) image whose output is `scale` times larger.

    With tiling, each tile core is evaluated with `overlap` pixels of surrounding context,
    cropped back to the core, and overlapping cores are feather-blended.
    """
    if not tile:
        out, _ = model.forward(image[None])
        return out[0]
    _, height, width = image.shape
    halo = overlap
    cells = [
        (y, x, min(tile, height), min(tile, width))
        for y in _tile_starts(height, tile, overlap)
        for x in _tile_starts(width, tile, overlap)
    ]

    def run(cell):
        y, x, th, tw = cell
        y0, x0 = max(0, y - halo), max(0, x - halo)
        y1, x1 = min(height, y + th + halo), min(width, x + tw + halo)
        out, _ = model.forward(image[None, :, y0:y1, x0:x1])
        oy, ox = scale * (y - y0), scale * (x - x0)
        return out[0, :, oy : oy + scale * th, ox : ox + scale * tw]

    outputs = parallel_map(run, cells)
    channels = outputs[0].shape[0]
    acc = np.zeros((channels, scale * height, scale * width), dtype=np.float64)
    weight_sum = np.zeros((scale * height, scale * width), dtype=np.float64)
    feather = scale * overlap
    for (y, x, th, tw), out in zip(cells, outputs):
        if out.shape[1:] != (scale * th, scale * tw):
            raise ShapeMismatchException(f"{model.role}: tile output {out.shape[1:]} != {(scale * th, scale * tw)}")
        wy = _ramp(scale * th, y, y + th, height, feather)
        wx = _ramp(scale * tw, x, x + tw, width, feather)
        weight = np.outer(wy, wx)
        sy, sx = slice(scale * y, scale * (y + th)), slice(scale * x, scale * (x + tw))
        acc[:, sy, sx] += weight * out
        weight_sum[sy, sx] += weight
    return (acc / weight_sum).astype(image.dtype)


def infer(bundle: PipelineBundle, lr: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (transformed, sr): the look-alike image (same size as `lr`) and its x4 super-resolution.

    Raises:
        PipelineException: if `lr` is smaller than 8x8.
        ShapeMismatchException: if a model does not fit the input.
    """
    if lr.ndim != 3 or min(lr.shape[1:]) < 8:
        raise PipelineException(f"inference needs a (c, h, w) image of at least 8x8, got {lr.shape}")
    transformed = run_tiled(bundle.lookalike, lr, 1, bundle.tile, bundle.tile_overlap)
    if transformed.shape != lr.shape:
        raise ShapeMismatchException(f"look-alike output {transformed.shape} != input {lr.shape}")
    sr = run_tiled(bundle.sr, transformed, config.SCALE, bundle.tile, bundle.tile_overlap)
    expected = (lr.shape[0], config.SCALE * lr.shape[1], config.SCALE * lr.shape[2])
    if sr.shape != expected:
        raise ShapeMismatchException(f"SR output {sr.shape} != {expected}")
    return transformed, sr


@dataclasses.dataclass
class Comparison:
    transformed: np.ndarray
    outputs: typing.Dict[str, np.ndarray]
    scores: typing.Optional[typing.Dict[str, typing.Tuple[float, float]]] = None

    def to_csv(self) -> str:
        lines = []
        if self.scores is None:
            lines.append("method,output")
            lines.extend(f"{method},{method}.ppm" for method in self.outputs)
        else:
            lines.append("method,psnr,ssim")
            lines.extend(
                f"{method},{metrics.format_score(p)},{metrics.format_score(s)}" for method, (p, s) in self.scores.items()
            )
        return "\n".join(lines) + "\n"


def montage(images: typing.Sequence[np.ndarray], gap: int = MONTAGE_GAP) -> np.ndarray:
    """Side-by-side layout on a white background, top-aligned."""
    channels = images[0].shape[0]
    height = max(image.shape[1] for image in images)
    width = sum(image.shape[2] for image in images) + gap * (len(images) - 1)
    canvas = np.ones((channels, height, width), dtype=np.float32)
    x = 0
    for image in images:
        canvas[:, : image.shape[1], x : x + image.shape[2]] = image
        x += image.shape[2] + gap
    return canvas


def compare_methods(
    lr: np.ndarray,
    hr: typing.Optional[np.ndarray],
    bundle: PipelineBundle,
    baseline: ModelGraph,
    outdir: typing.Optional[str] = None,
    ssim_config: metrics.SsimConfig = metrics.SsimConfig(),
) -> Comparison:
    """
    Super-resolve `lr` with bicubic upsampling, the end-to-end baseline and the two-step
    pipeline. With `hr`, every method gets PSNR and SSIM. With `outdir`, every output, the
    transformed LR, a montage and `report.csv` are written there.
    """
    baseline.freeze()
    if hr is not None and hr.shape != (lr.shape[0], config.SCALE * lr.shape[1], config.SCALE * lr.shape[2]):
        raise ShapeMismatchException(f"HR {hr.shape} is not {config.SCALE}x LR {lr.shape}")
    transformed, two_step = infer(bundle, lr)
    outputs = {
        "bicubic": resample.upsample_bicubic_x4(lr),
        "baseline": run_tiled(baseline, lr, config.SCALE, bundle.tile, bundle.tile_overlap),
        "two_step": two_step,
    }
    scores = None
    if hr is not None:
        scores = {m: (metrics.psnr(out, hr), metrics.ssim(out, hr, ssim_config)) for m, out in outputs.items()}
        for method, (p, s) in scores.items():
            logger.info(f"{method}: PSNR {p:.3f} dB, SSIM {s:.4f}")
    comparison = Comparison(transformed, outputs, scores)
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        for method, image in outputs.items():
            imageio.write_image(os.path.join(outdir, f"{method}.ppm"), image)
        imageio.write_image(os.path.join(outdir, "transformed.ppm"), transformed)
        panels = [outputs[m] for m in METHODS] + ([hr] if hr is not None else [])
        imageio.write_image(os.path.join(outdir, "montage.ppm"), montage(panels))
        with open(os.path.join(outdir, "report.csv"), "w", encoding="utf-8") as file:
            file.write(comparison.to_csv())
        logger.info(f"Wrote comparison to {outdir}")
    return comparison
