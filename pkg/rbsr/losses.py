"""
This module contains the training losses. Every loss returns its value together with the
gradient with respect to the prediction it was given.
"""

import dataclasses
import logging
import typing

import annotated_types
import numpy as np
import pydantic

from . import config
from .models import ModelConfigException, ModelGraph
from .nn.functional import record_kinks
from .nn.tensor import ShapeMismatchException
from .utils import RbsrException

logger = logging.getLogger("rbsr.losses")

_Weight = typing.Annotated[float, annotated_types.Ge(0)]


class FrozenExtractorException(RbsrException):
    pass


class LossWeights(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    alpha: _Weight = config.LOSS_WEIGHTS[0]
    beta: _Weight = config.LOSS_WEIGHTS[1]
    gamma: _Weight = config.LOSS_WEIGHTS[2]


@dataclasses.dataclass
class FeatureExtractor:
    """
    A frozen SR generator tapped after residual block `tap_block` (1-based, default: the last block).
    The model is frozen on construction and its weight checksum recorded.
    """

    model: ModelGraph
    tap_block: typing.Optional[int] = None

    def __post_init__(self):
        n_blocks = len(self.model.block_ends)
        if self.tap_block is None:
            self.tap_block = n_blocks
        if not 1 <= self.tap_block <= n_blocks:
            raise ModelConfigException(f"tap_block {self.tap_block} outside 1..{n_blocks}")
        self.model.freeze()
        self.checksum = self.model.checksum()

    @property
    def tap_layer(self) -> int:
        return self.model.block_ends[self.tap_block - 1]

    def features(self, x: np.ndarray):
        return self.model.forward(x, stop_after=self.tap_layer)

    def verify(self):
        """
        Raises:
            FrozenExtractorException: if the extractor weights changed since construction.
        """
        if not self.model.frozen or self.model.checksum() != self.checksum:
            raise FrozenExtractorException("perceptual extractor weights changed during training")


def _check_shapes(pred: np.ndarray, target: np.ndarray, what: str):
    if pred.shape != target.shape:
        raise ShapeMismatchException(f"{what}: prediction {pred.shape} != target {target.shape}")


def l1_loss(pred: np.ndarray, target: np.ndarray) -> typing.Tuple[float, np.ndarray]:
    _check_shapes(pred, target, "l1_loss")
    diff = pred - target
    record_kinks(diff)
    return float(np.mean(np.abs(diff))), (np.sign(diff) / diff.size).astype(pred.dtype)


@dataclasses.dataclass(frozen=True)
class AdversarialLosses:
    loss_d: float
    loss_g: float
    grad_d_real: np.ndarray  # d loss_d / d d_real
    grad_d_fake: np.ndarray  # d loss_d / d d_fake
    grad_g_fake: np.ndarray  # d loss_g / d d_fake


def _clamped(p: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, config.PROB_CLAMP, 1 - config.PROB_CLAMP)
    return clamped, (clamped == p).astype(np.float64)


def discriminator_loss(d_real: np.ndarray, d_fake: np.ndarray) -> typing.Tuple[float, np.ndarray, np.ndarray]:
    real, real_mask = _clamped(d_real)
    fake, fake_mask = _clamped(d_fake)
    loss = -(np.mean(np.log(real)) + np.mean(np.log(1 - fake)))
    grad_real = -real_mask / (real * real.size)
    grad_fake = fake_mask / ((1 - fake) * fake.size)
    return float(loss), grad_real.astype(np.asarray(d_real).dtype), grad_fake.astype(np.asarray(d_fake).dtype)


def generator_loss(d_fake: np.ndarray) -> typing.Tuple[float, np.ndarray]:
    """Non-saturating form, -mean(log d_fake)."""
    fake, mask = _clamped(d_fake)
    loss = -np.mean(np.log(fake))
    return float(loss), (-mask / (fake * fake.size)).astype(np.asarray(d_fake).dtype)


def adversarial_losses(d_real: np.ndarray, d_fake: np.ndarray) -> AdversarialLosses:
    """
    Discriminator and generator losses from discriminator probabilities, clamped to
    [1e-7, 1 - 1e-7] before the logarithms.
    """
    loss_d, grad_real, grad_fake = discriminator_loss(d_real, d_fake)
    loss_g, grad_g = generator_loss(d_fake)
    return AdversarialLosses(loss_d, loss_g, grad_real, grad_fake, grad_g)


def bicubic_perceptual_loss(
    pred: np.ndarray, target: np.ndarray, fx: FeatureExtractor
) -> typing.Tuple[float, np.ndarray]:
    """
    Mean squared difference of the extractor features of `pred` and `target`, averaged over
    every feature element. The gradient flows through the extractor to `pred` only.

    Raises:
        ShapeMismatchException: if pred and target differ in shape.
        FrozenExtractorException: if the extractor model is not frozen.
    """
    _check_shapes(pred, target, "bicubic_perceptual_loss")
    if not fx.model.frozen:
        raise FrozenExtractorException("perceptual extractor must be frozen")
    pred_features, trace = fx.features(pred)
    target_features, _ = fx.features(target)
    diff = pred_features - target_features
    value = float(np.mean(np.square(diff, dtype=np.float64)))
    dpred = fx.model.backward(trace, (2.0 / diff.size) * diff, param_grads=False)
    return value, dpred.astype(pred.dtype)


def total_loss(l_pix: float, l_perc: float, l_adv: float, weights: LossWeights) -> float:
    return weights.alpha * l_pix + weights.beta * l_perc + weights.gamma * l_adv
