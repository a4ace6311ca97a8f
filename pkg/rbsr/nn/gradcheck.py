"""
This module contains the finite-difference oracle used to verify every backward rule.
"""

import logging
import typing

import numpy as np

from .. import config
from .functional import kink_recording
from .tensor import Parameter

logger = logging.getLogger("rbsr.nn.gradcheck")

# loss(pred) -> (value, d value / d pred)
LossFn = typing.Callable[[np.ndarray], typing.Tuple[float, np.ndarray]]


class Differentiable(typing.Protocol):
    def forward(self, x: np.ndarray) -> typing.Tuple[np.ndarray, typing.Any]: ...

    def backward(self, trace: typing.Any, dy: np.ndarray) -> np.ndarray: ...

    def parameters(self) -> typing.List[Parameter]: ...

    def zero_grad(self): ...

    def astype(self, dtype) -> "Differentiable": ...


def finite_diff_check(
    model: Differentiable,
    loss: LossFn,
    x: np.ndarray,
    epsilon: float = config.GRADCHECK_EPSILON,
    samples: int = config.GRADCHECK_SAMPLES,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """
    Compare backward-pass gradients with central differences on a 64-bit copy of the model.

    Coordinates are drawn without replacement from all parameters and the input. A draw whose two
    perturbed evaluations fall on different sides of a ReLU or L1 kink is discarded and replaced by
    the next one; a warning is logged when fewer than `samples` coordinates could be checked.

    Returns:
        float: maximum relative error |a - n| / max(|a|, |n|, floor) over the checked coordinates.
    """
    model = model.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    model.zero_grad()
    out, trace = model.forward(x)
    _, dout = loss(out)
    dx = model.backward(trace, dout)

    targets = [(p.value, p.grad) for p in model.parameters()] + [(x, dx)]
    sizes = np.array([value.size for value, _ in targets])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    def evaluate():
        with kink_recording() as kinks:
            value, _ = loss(model.forward(x)[0])
        return value, kinks

    rng = np.random.default_rng(seed)
    wanted = min(samples, total)
    worst, checked, skipped = 0.0, 0, 0
    for flat in rng.permutation(total):
        if checked == wanted or skipped >= 20 * wanted:
            break
        flat = int(flat)
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        value, grad = targets[which]
        index = flat - offsets[which]
        original = value.flat[index]
        value.flat[index] = original + epsilon
        plus, kinks_plus = evaluate()
        value.flat[index] = original - epsilon
        minus, kinks_minus = evaluate()
        value.flat[index] = original
        if len(kinks_plus) != len(kinks_minus) or any(
            not np.array_equal(a, b) for a, b in zip(kinks_plus, kinks_minus)
        ):
            skipped += 1
            continue
        numeric = (plus - minus) / (2 * epsilon)
        analytic = grad.flat[index]
        error = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
        worst = max(worst, error)
        checked += 1
    logger.debug(f"Gradient check: {checked} coordinates, {skipped} kink crossings skipped, max error {worst:.3g}")
    if checked < wanted:
        logger.warning(f"Gradient check covered only {checked} of {wanted} coordinates ({skipped} kink crossings)")
    return worst
