"""Minimal tensor library with reverse-mode automatic differentiation."""

from tame.autodiff.ops import (
    batchnorm2d,
    bilinear_upsample,
    conv2d,
    flatten,
    interpolation_matrix,
    linear,
    log_softmax,
    masked,
    maxpool2d,
    softmax,
)
from tame.autodiff.tensor import (
    Node,
    Tape,
    Tensor,
    add,
    as_tensor,
    astype,
    backward,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    sub,
    take_rows,
    tsum,
    unbroadcast,
)

__all__ = [
    "Node", "Tape", "Tensor", "add", "as_tensor", "astype", "backward", "batchnorm2d", "bilinear_upsample",
    "concat", "conv2d", "div", "exp", "flatten", "getitem", "interpolation_matrix", "linear", "log",
    "log_softmax", "masked", "matmul", "maxpool2d", "mean", "mul", "neg", "power", "relu", "reshape",
    "sigmoid", "softmax", "sub", "take_rows", "tsum", "unbroadcast",
]
