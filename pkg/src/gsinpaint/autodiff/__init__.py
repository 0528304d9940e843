from .checkpoint import load_arrays, save_arrays
from .gradcheck import gradient_check
from .tensor import (
    Function,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    gelu,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
)
