"""Minimal dense numerical core with reverse-mode gradients."""

from conmask.numkit.adam import AdamState, adam_update
from conmask.numkit.gradcheck import grad_check
from conmask.numkit.ops import (
    BN_EPS,
    BatchNormState,
    batch_norm,
    concat_rows,
    conv1d,
    cosine,
    dropout,
    embed_rows,
    l2_normalize_rows,
    logsumexp,
    maxpool1d,
    meanpool_rows,
    rowmax,
    scale_rows,
    sigmoid,
    slice_rows,
    softmax_row,
    trailing_window_max,
)
from conmask.numkit.tensor import (
    Tensor,
    add,
    as_tensor,
    constant,
    exp,
    log,
    matmul,
    mul,
    pad_rows,
    parameter,
    stack_scalars,
    sub,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "AdamState",
    "BN_EPS",
    "BatchNormState",
    "Tensor",
    "adam_update",
    "add",
    "as_tensor",
    "batch_norm",
    "constant",
    "concat_rows",
    "conv1d",
    "cosine",
    "dropout",
    "embed_rows",
    "exp",
    "grad_check",
    "l2_normalize_rows",
    "log",
    "logsumexp",
    "matmul",
    "maxpool1d",
    "meanpool_rows",
    "mul",
    "pad_rows",
    "parameter",
    "rowmax",
    "scale_rows",
    "sigmoid",
    "slice_rows",
    "softmax_row",
    "stack_scalars",
    "sub",
    "tmean",
    "transpose",
    "tsum",
]
