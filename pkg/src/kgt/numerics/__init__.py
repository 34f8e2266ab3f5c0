"""Minimal dense tensors with reverse-mode differentiation."""

from kgt.numerics.gradcheck import grad_check
from kgt.numerics.ops import (
    abs,
    add,
    add_bias,
    conv2d_3x3,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    permute,
    reshape,
    softmax_kernel,
    softmax_rows,
    square,
    sub,
    sum,
    take,
    transpose_last,
)
from kgt.numerics.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    default_dtype,
    float64_mode,
    grad_enabled,
    make_result,
    neg_sentinel,
    no_grad,
)

__all__ = [
    "Parameter", "Tensor", "abs", "add", "add_bias", "as_tensor", "conv2d_3x3",
    "default_dtype", "float64_mode", "gelu", "grad_check", "grad_enabled", "layer_norm",
    "make_result", "matmul", "mean", "mul", "neg_sentinel", "no_grad", "permute",
    "reshape", "softmax_kernel", "softmax_rows", "square", "sub", "sum", "take",
    "transpose_last",
]
