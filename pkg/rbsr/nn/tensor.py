import dataclasses
import typing

import numpy as np

from ..utils import RbsrException

# (n, c, h, w) batches; weights (out_c, in_c, kh, kw); biases and dense weights keep their natural rank
Tensor4 = np.ndarray


class ShapeMismatchException(RbsrException):
    pass


class FrozenParameterException(RbsrException):
    pass


@dataclasses.dataclass(eq=False)
class Parameter:
    """
    Trainable tensor with its gradient and Adam moments. `step` counts completed optimizer updates.
    """

    name: str
    value: np.ndarray
    grad: typing.Optional[np.ndarray] = None
    m: typing.Optional[np.ndarray] = None
    v: typing.Optional[np.ndarray] = None
    step: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.grad = np.zeros_like(self.value) if self.grad is None else self.grad
        self.m = np.zeros_like(self.value) if self.m is None else self.m
        self.v = np.zeros_like(self.value) if self.v is None else self.v
        for field in ("grad", "m", "v"):
            if getattr(self, field).shape != self.value.shape:
                raise ShapeMismatchException(
                    f"{self.name}: {field} shape {getattr(self, field).shape} != value shape {self.value.shape}"
                )

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "Parameter":
        return Parameter(
            name=self.name,
            value=self.value.astype(dtype),
            grad=self.grad.astype(dtype),
            m=self.m.astype(dtype),
            v=self.v.astype(dtype),
            step=self.step,
            frozen=self.frozen,
        )
