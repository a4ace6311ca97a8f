"""
This module contains the layer primitives of the engine and their backward rules.

Network "convolution" here is cross-correlation (no kernel flip), unlike `rbsr.degrade.convolve2d`.
"""

import contextlib
import contextvars
import typing

import numpy as np
import scipy.special

from .tensor import ShapeMismatchException, Tensor4

_kinks: contextvars.ContextVar[typing.Optional[typing.List[np.ndarray]]] = contextvars.ContextVar(
    "rbsr_kinks", default=None
)


@contextlib.contextmanager
def kink_recording():
    """
    Collect the sign patterns at every non-differentiable point evaluated inside the block.
    """
    token = _kinks.set([])
    try:
        yield _kinks.get()
    finally:
        _kinks.reset(token)


def record_kinks(values: np.ndarray):
    log = _kinks.get()
    if log is not None:
        log.append(np.sign(values).astype(np.int8))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    # floor division, so stride-2 layers on even inputs halve the size
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatchException(f"input size {size} too small for kernel {kernel}, stride {stride}, pad {pad}")
    return out


def _windows(x: Tensor4, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : stride * oh : stride, : stride * ow : stride]


def conv2d(x: Tensor4, w: Tensor4, b: np.ndarray, stride: int = 1, pad: int = 0) -> Tensor4:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchException(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatchException(f"conv2d bias {b.shape} does not match {w.shape[0]} output channels")
    cols = _windows(x, w.shape[2], w.shape[3], stride, pad)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2) + b[None, :, None, None], dtype=x.dtype)


def conv2d_grad(
    x: Tensor4, w: Tensor4, dy: Tensor4, stride: int = 1, pad: int = 0
) -> typing.Tuple[Tensor4, Tensor4, np.ndarray]:
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    cols = _windows(x, kh, kw, stride, pad)
    oh, ow = cols.shape[2], cols.shape[3]
    if dy.shape != (n, w.shape[0], oh, ow):
        raise ShapeMismatchException(f"conv2d_grad dy {dy.shape} != forward output {(n, w.shape[0], oh, ow)}")
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    db = dy.sum(axis=(0, 2, 3)).astype(x.dtype)
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        record_kinks(x)
        return np.maximum(x, 0)
    if kind == "sigmoid":
        s = scipy.special.expit(x)
        # stays strictly inside (0, 1) where the dtype would round to 0 or 1
        info = np.finfo(s.dtype)
        return np.clip(s, info.tiny, 1 - info.epsneg)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x: np.ndarray, dy: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return dy * (x > 0)
    if kind == "sigmoid":
        s = scipy.special.expit(x)
        return dy * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatchException(f"dense input {x.shape} incompatible with weight {w.shape}, bias {b.shape}")
    return x @ w.T + b


def dense_grad(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeMismatchException(f"dense_grad dy {dy.shape} != forward output {(x.shape[0], w.shape[0])}")
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def pixel_shuffle(x: Tensor4, r: int) -> Tensor4:
    """
    (n, c*r*r, h, w) -> (n, c, h*r, w*r) with out[n, c, h*r+dy, w*r+dx] = in[n, c*r*r + dy*r + dx, h, w].
    """
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeMismatchException(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, c // (r * r), h * r, w * r))


def pixel_unshuffle(x: Tensor4, r: int) -> Tensor4:
    """
    Inverse of `pixel_shuffle`; also its backward rule.
    """
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeMismatchException(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * r * r, h // r, w // r))
