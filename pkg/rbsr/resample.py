"""
This module contains separable bicubic resampling, the reference degradation of the whole pipeline.
"""

import enum
import fractions
import logging
import typing

import annotated_types
import numpy as np
import pydantic

from . import config
from .imageio import ImageTensor
from .utils import RbsrException

logger = logging.getLogger("rbsr.resample")


class ResampleException(RbsrException):
    pass


class ImageTooSmallException(ResampleException):
    pass


class Boundary(str, enum.Enum):
    REFLECT = "reflect"  # mirror without repeating the edge sample
    CLAMP = "clamp"


class ResampleSpec(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    scale_num: typing.Annotated[int, annotated_types.Ge(1)] = 1
    scale_den: typing.Annotated[int, annotated_types.Ge(1)] = 1
    kernel_a: typing.Annotated[float, annotated_types.Le(0)] = config.BICUBIC_A
    antialias: bool = True
    boundary: Boundary = Boundary.REFLECT

    @classmethod
    def from_scale(cls, scale: str, **kwargs) -> "ResampleSpec":
        """
        Build a spec from a scale written as `N/D`, `N` or a decimal such as `0.25`.
        """
        try:
            ratio = fractions.Fraction(scale.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ResampleException(f"invalid scale {scale!r}") from e
        if ratio <= 0:
            raise ResampleException(f"scale must be positive, got {scale!r}")
        return cls(scale_num=ratio.numerator, scale_den=ratio.denominator, **kwargs)

    def output_size(self, size: int) -> int:
        # round(size * num / den), halves away from zero, in exact integer arithmetic
        return (2 * size * self.scale_num + self.scale_den) // (2 * self.scale_den)


def cubic_weight(t, a: float = config.BICUBIC_A):
    """
    Keys cubic convolution kernel. Accepts scalars or arrays.
    """
    x = np.abs(np.asarray(t, dtype=np.float64))
    near = (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    far = a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    weight = np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))
    return float(weight) if weight.ndim == 0 else weight


def boundary_index(index: np.ndarray, size: int, boundary: Boundary) -> np.ndarray:
    if boundary == Boundary.CLAMP or size == 1:
        return np.clip(index, 0, size - 1)
    period = 2 * (size - 1)
    index = np.mod(index, period)
    return np.where(index >= size, period - index, index)


def weight_matrix(
    in_size: int,
    out_size: int,
    a: float = config.BICUBIC_A,
    antialias: bool = True,
    boundary: Boundary = Boundary.REFLECT,
) -> np.ndarray:
    """
    Dense (out_size, in_size) matrix of normalized tap weights for one axis.

    Source coordinate of destination sample d is (d + 0.5) * in/out - 0.5. When
    downscaling with antialias the kernel argument and support are stretched by in/out.
    """
    ratio = in_size / out_size
    stretch = ratio if antialias and ratio > 1.0 else 1.0
    support = 2.0 * stretch
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * ratio - 0.5
    first = np.floor(centers - support).astype(np.int64)
    n_taps = int(np.ceil(2.0 * support)) + 2
    taps = first[:, None] + np.arange(n_taps)[None, :]
    weights = cubic_weight((centers[:, None] - taps) / stretch, a)
    weights /= weights.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(out_size), n_taps)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (rows, boundary_index(taps, in_size, boundary).ravel()), weights.ravel())
    return matrix


def resize(image: ImageTensor, spec: ResampleSpec) -> ImageTensor:
    """
    Separable resampling, rows first, then columns.
    """
    _, height, width = image.shape
    out_h, out_w = spec.output_size(height), spec.output_size(width)
    if out_h < 1 or out_w < 1:
        raise ResampleException(f"degenerate output size {out_h}x{out_w} for input {height}x{width}")
    rows = weight_matrix(height, out_h, spec.kernel_a, spec.antialias, spec.boundary)
    cols = weight_matrix(width, out_w, spec.kernel_a, spec.antialias, spec.boundary)
    out = np.matmul(rows, np.asarray(image, dtype=np.float64))
    out = np.matmul(out, cols.T)
    return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)


def downsample_bicubic_x4(image: ImageTensor) -> ImageTensor:
    _, height, width = image.shape
    if height < 8 or width < 8:
        raise ImageTooSmallException(f"bicubic x4 downsampling needs at least 8x8, got {height}x{width}")
    return resize(image, ResampleSpec(scale_num=1, scale_den=config.SCALE, antialias=True))


def upsample_bicubic_x4(image: ImageTensor) -> ImageTensor:
    return resize(image, ResampleSpec(scale_num=config.SCALE, scale_den=1, antialias=True))
