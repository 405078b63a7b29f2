"""Minimal float64 tensor/tape engine and the layers the learner needs."""

from .layers import (
    Categorical,
    categorical,
    categorical_head,
    categorical_kl,
    init_linear,
    init_lstm,
    kl_diag_gaussian_vs_standard,
    linear,
    lstm_cell,
    orthogonal,
    reparameterized_sample,
    sample_gaussian,
)
from .params import Adam, CheckpointError, ParameterSet, load_checkpoint, save_checkpoint
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    clip,
    concat,
    exp,
    log,
    log_softmax,
    minimum,
    pick,
    sigmoid,
    softmax,
    square,
    stack,
    tanh,
)

__all__ = [name for name in dir() if not name.startswith("_")]
