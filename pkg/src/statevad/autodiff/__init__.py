from .functional import batch_norm, conv2d, conv_transpose2d, group_norm, maxpool2d
from .io import TensorFormatError, read_tensor, write_tensor
from .optim import AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    concat,
    default_dtype,
    elementwise,
    exp,
    get_default_dtype,
    getitem,
    leaky_relu,
    mean,
    mul,
    no_grad,
    parameter,
    pnorm_pp,
    pow_scalar,
    relu,
    reshape,
    set_default_dtype,
    sign,
    softmax,
    split,
    stack,
    sub,
    sum_,
    transpose,
)
