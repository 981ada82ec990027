"""Small numpy tensor library with reverse-mode autodiff and Adam."""

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .ops import (
    add,
    bce_elementwise,
    concat,
    cross_entropy_row,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean,
    mean_pool,
    mul,
    multi_head_self_attention,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    take,
    transpose,
)
from .ops import sum as sum_  # noqa: F401
from .optim import Adam, AdamState, adam_step
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    backward,
    current_tape,
)

__all__ = [
    "Adam", "AdamState", "CheckpointError", "DimensionError", "NonFiniteError",
    "Tape", "TapeError", "Tensor", "adam_step", "add", "backward", "bce_elementwise",
    "concat", "cross_entropy_row", "current_tape", "embedding_lookup", "gelu",
    "layer_norm", "load_tensors", "matmul", "mean", "mean_pool", "mul",
    "multi_head_self_attention", "relu", "reshape", "save_tensors", "sigmoid",
    "softmax", "sub", "sum_", "take", "transpose",
]
