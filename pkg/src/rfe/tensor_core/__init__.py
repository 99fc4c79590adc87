from . import ops, weights
from .adam import Adam, AdamState, adam_step
from .ops import (
    add,
    concat,
    conv2d,
    elementwise,
    flatten,
    global_avgpool,
    linear,
    masked_softmax,
    masked_softmax_cross_entropy,
    matmul,
    maxpool2d,
    mse_sum,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
)
from .tensor import Tape, Tensor, current_tape

__all__ = [
    "Adam", "AdamState", "Tape", "Tensor", "adam_step", "add", "concat", "conv2d",
    "current_tape", "elementwise", "flatten", "global_avgpool", "linear", "masked_softmax",
    "masked_softmax_cross_entropy", "matmul", "maxpool2d", "mse_sum", "mul", "ops", "relu",
    "reshape", "scale", "sigmoid", "sub", "weights",
]
