from rlqfs.ndgrad.optim import SGD, Adam, clip_grad_norm, make_optimizer
from rlqfs.ndgrad.rng import derive_rng, make_rng, restore_rng, rng_state, split_rng
from rlqfs.ndgrad.tensor import (
    Tensor,
    add,
    backward,
    clamp,
    concat,
    cross_entropy,
    dropout,
    embedding,
    gather_pairs,
    gelu,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    narrow,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "tanh",
    "gelu",
    "sigmoid",
    "log",
    "clamp",
    "tsum",
    "tmean",
    "embedding",
    "gather_pairs",
    "dropout",
    "layer_norm",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "SGD",
    "Adam",
    "clip_grad_norm",
    "make_optimizer",
    "make_rng",
    "derive_rng",
    "split_rng",
    "rng_state",
    "restore_rng",
]
