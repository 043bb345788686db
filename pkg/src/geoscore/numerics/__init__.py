"""Dense tensors with reverse-mode differentiation, loss, and Adam.

The substrate the fusion model trains on: a small tape-based autodiff over
numpy arrays. Float64 throughout training so finite-difference checks hold.
"""

from geoscore.numerics.tensor import (
    ContractError,
    GradTape,
    ParameterError,
    ShapeError,
    Tensor,
    add,
    backward,
    broadcast_to,
    concat,
    dropout_mask,
    gelu,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    relu,
    reshape,
    softmax,
    softmax_rows,
    sub,
    sum_,
    transpose,
)
from geoscore.numerics.optim import AdamState, adam_step
from geoscore.numerics.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamState",
    "ContractError",
    "GradTape",
    "ParameterError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "broadcast_to",
    "concat",
    "dropout_mask",
    "gelu",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "mean",
    "mse",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "softmax",
    "softmax_rows",
    "sub",
    "sum_",
    "transpose",
]
