"""
Synthetic training corpus: procedural HR images, their bicubic and non-bicubic LR versions,
and the three training manifests.

Layout under the output directory:

    hr/        HR images
    bicubic/   downsample_bicubic_x4(HR)
    real/      degrade(HR) with the stand-in "real" Gaussian kernel
    synthetic/ degrade(HR) with a random anisotropic Gaussian kernel per image (training only)
    sr_train.tsv, lookalike_train.tsv, e2e_train.tsv, test.tsv
"""

import dataclasses
import logging
import os
import typing

import annotated_types
import numpy as np
import pydantic

from . import config, degrade, imageio, resample
from .trainer import EntryKind, ManifestEntry, write_manifest

logger = logging.getLogger("rbsr.corpus")


class CorpusConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    n_train: typing.Annotated[int, annotated_types.Ge(1)] = 20
    n_test: typing.Annotated[int, annotated_types.Ge(0)] = 5
    hr_size: typing.Annotated[int, annotated_types.Ge(32)] = 192
    sigma: typing.Annotated[float, annotated_types.Gt(0)] = 1.8
    kernel_size: typing.Annotated[int, annotated_types.Ge(1)] = config.KERNEL_SIZE
    noise_sigma: typing.Annotated[float, annotated_types.Ge(0)] = 0.0
    seed: int = 0

    @pydantic.field_validator("hr_size")
    @classmethod
    def ensure_divisible(cls, size: int) -> int:
        if size % config.SCALE:
            raise ValueError(f"hr_size must be divisible by {config.SCALE}")
        return size


@dataclasses.dataclass
class Corpus:
    root: str
    sr_manifest: str
    lookalike_manifest: str
    e2e_manifest: str
    test_manifest: str


def synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """
    A (3, size, size) image in [0, 1]: a colour gradient with rectangles, soft blobs and a stripe patch.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    start, end = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    image = start[:, None, None] + (end - start)[:, None, None] * ramp[None] / max(ramp.max(), 1e-6)

    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(4, size // 2, size=2)
        image[:, y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 1, size=3)[:, None, None]

    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, size=2)
        radius = rng.uniform(0.03, 0.15)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        image = image * (1 - blob[None]) + rng.uniform(0, 1, size=3)[:, None, None] * blob[None]

    period = rng.uniform(3, 12)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) - yy * np.sin(angle)) * size / period)
    y0, x0 = rng.integers(0, size // 2, size=2)
    patch = (slice(y0, y0 + size // 3), slice(x0, x0 + size // 3))
    image[:, patch[0], patch[1]] = stripes[patch][None] * rng.uniform(0.5, 1, size=3)[:, None, None]
    return np.clip(image, 0, 1).astype(np.float32)


def _random_anisotropic(rng: np.random.Generator, size: int) -> degrade.BlurKernel:
    sigma_x, sigma_y = rng.uniform(0.8, 2.4, size=2)
    return degrade.make_anisotropic_gaussian_kernel(sigma_x, sigma_y, rng.uniform(0, np.pi), size)


def make_corpus(out_dir: str, corpus_config: CorpusConfig = CorpusConfig()) -> Corpus:
    rng = np.random.default_rng(corpus_config.seed)
    real_kernel = degrade.make_gaussian_kernel(corpus_config.sigma, corpus_config.kernel_size)
    for sub in ("hr", "bicubic", "real", "synthetic"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    def save(sub: str, name: str, image: np.ndarray) -> str:
        path = os.path.join(out_dir, sub, f"{name}.ppm")
        imageio.write_image(path, image)
        return path

    sr, lookalike, e2e, test = [], [], [], []
    for index in range(corpus_config.n_train + corpus_config.n_test):
        training = index < corpus_config.n_train
        name = f"{'train' if training else 'test'}_{index:04d}"
        hr = imageio.to_tensor(imageio.to_raw(synthetic_image(rng, corpus_config.hr_size)))
        hr_path = save("hr", name, hr)
        bicubic_path = save("bicubic", name, resample.downsample_bicubic_x4(hr))
        real = degrade.degrade(
            hr,
            degrade.DegradationParams(kernel=real_kernel, noise_sigma=corpus_config.noise_sigma, seed=2 * index),
        )
        real_path = save("real", name, real)
        if not training:
            test.append(ManifestEntry(kind=EntryKind.REAL_PAIR, input_path=real_path, target_path=hr_path))
            continue
        params = degrade.DegradationParams(
            kernel=_random_anisotropic(rng, corpus_config.kernel_size),
            noise_sigma=corpus_config.noise_sigma,
            seed=2 * index + 1,
        )
        synthetic_path = save("synthetic", name, degrade.degrade(hr, params))
        sr.append(ManifestEntry(kind=EntryKind.SYNTHETIC_PAIR, input_path=bicubic_path, target_path=hr_path))
        lookalike.extend(
            [
                ManifestEntry(kind=EntryKind.REAL_PAIR, input_path=real_path, target_path=bicubic_path),
                ManifestEntry(kind=EntryKind.SYNTHETIC_PAIR, input_path=synthetic_path, target_path=bicubic_path),
                ManifestEntry(kind=EntryKind.IDENTITY_BICUBIC, input_path=bicubic_path, target_path=bicubic_path),
            ]
        )
        e2e.extend(
            [
                ManifestEntry(kind=EntryKind.REAL_PAIR, input_path=real_path, target_path=hr_path),
                ManifestEntry(kind=EntryKind.SYNTHETIC_PAIR, input_path=synthetic_path, target_path=hr_path),
                ManifestEntry(kind=EntryKind.SYNTHETIC_PAIR, input_path=bicubic_path, target_path=hr_path),
            ]
        )

    corpus = Corpus(
        root=out_dir,
        sr_manifest=os.path.join(out_dir, "sr_train.tsv"),
        lookalike_manifest=os.path.join(out_dir, "lookalike_train.tsv"),
        e2e_manifest=os.path.join(out_dir, "e2e_train.tsv"),
        test_manifest=os.path.join(out_dir, "test.tsv"),
    )
    write_manifest(corpus.sr_manifest, sr)
    write_manifest(corpus.lookalike_manifest, lookalike)
    write_manifest(corpus.e2e_manifest, e2e)
    write_manifest(corpus.test_manifest, test)
    logger.info(
        f"Wrote corpus to {out_dir}: {corpus_config.n_train} training and {corpus_config.n_test} test images "
        f"(real kernel gaussian sigma={corpus_config.sigma})"
    )
    return corpus
