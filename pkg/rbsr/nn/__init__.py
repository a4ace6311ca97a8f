from .tensor import Parameter, Tensor4, ShapeMismatchException, FrozenParameterException
from .functional import (
    conv2d,
    conv2d_grad,
    activation,
    activation_grad,
    dense,
    dense_grad,
    pixel_shuffle,
    pixel_unshuffle,
)
from .optim import AdamConfig, Adam, adam_step
from .checkpoint import checkpoint_write, checkpoint_read
from .gradcheck import finite_diff_check
