import logging
import typing

import annotated_types
import numpy as np
import pydantic

from .tensor import FrozenParameterException, Parameter

logger = logging.getLogger("rbsr.nn.optim")

_Beta = typing.Annotated[float, annotated_types.Ge(0), annotated_types.Lt(1)]


class AdamConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    lr: typing.Annotated[float, annotated_types.Ge(0)] = 1e-4
    beta1: _Beta = 0.9
    beta2: _Beta = 0.999
    eps: typing.Annotated[float, annotated_types.Gt(0)] = 1e-8


def adam_step(param: Parameter, config: AdamConfig) -> Parameter:
    """
    One bias-corrected Adam update, in place. Frozen parameters are refused.
    """
    if param.frozen:
        raise FrozenParameterException(f"{param.name} is frozen and cannot be updated")
    param.step += 1
    g = param.grad
    param.m *= config.beta1
    param.m += (1 - config.beta1) * g
    param.v *= config.beta2
    param.v += (1 - config.beta2) * g * g
    m_hat = param.m / (1 - config.beta1**param.step)
    v_hat = param.v / (1 - config.beta2**param.step)
    param.value -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(param.value.dtype)
    return param


class Adam:
    """
    Applies `adam_step` to a fixed list of parameters; the learning rate may change per call.
    """

    def __init__(self, params: typing.Sequence[Parameter], config: AdamConfig):
        self.params = [p for p in params if not p.frozen]
        self.config = config

    def step(self, lr: typing.Optional[float] = None):
        config = self.config if lr is None else self.config.model_copy(update={"lr": lr})
        for param in self.params:
            adam_step(param, config)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()
