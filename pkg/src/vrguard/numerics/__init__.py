"""Tensor arithmetic, reverse-mode autodiff, Adam, and seeded randomness."""

from .gradcheck import GradCheckReport, finite_diff_check
from .optim import Adam
from .rng import SeededRng
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    constant,
    conv1d,
    cross_entropy,
    dropout,
    getitem,
    log,
    log_softmax,
    matmul,
    maxpool1d,
    mul,
    neg,
    parameter,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
)

__all__ = [
    "Adam", "GradCheckReport", "SeededRng", "Tensor",
    "add", "backward", "concat", "constant", "conv1d", "cross_entropy",
    "dropout", "finite_diff_check", "getitem", "log", "log_softmax", "matmul",
    "maxpool1d", "mul", "neg", "parameter", "reduce_max", "reduce_mean",
    "reduce_sum", "relu", "reshape", "sigmoid", "softmax", "tanh",
]
