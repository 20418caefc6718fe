"""Minimal differentiable tensor substrate (numpy backed)."""

from . import ops
from .gradcheck import GradCheckReport, NondeterministicFunctionError, grad_check, relative_error
from .ops import (
    add,
    avg_pool2d,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    group_norm,
    layer_norm,
    linear,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scaled_dot_product_attention,
    sigmoid,
    silu,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    transpose,
    upsample_nearest,
    where,
)
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    build_tape,
    check_finite,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    zero_grad,
)
