"""Reverse-mode automatic differentiation on float64 numpy arrays."""
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .conv import conv2d, conv2d_transpose
from .core import (
    GradientMap,
    Tape,
    Tensor,
    absolute,
    add,
    affine,
    backward,
    concat,
    dense,
    elementwise,
    elu,
    exp,
    log,
    matmul,
    mul,
    no_record,
    reciprocal,
    relu,
    reshape,
    sigmoid,
    softplus,
    split,
    sqrt,
    square,
    stack,
    sub,
    tanh,
    tmean,
    tsum,
)
from .distributions import DiagGaussian, bernoulli_nll, gaussian_kl, gaussian_nll, reparameterize
from .optim import Adam, AdamState, adam_step, clip_by_global_norm

__all__ = [
    "Adam", "AdamState", "DiagGaussian", "GradientMap", "Tape", "Tensor", "absolute", "adam_step", "add",
    "affine", "backward", "bernoulli_nll", "clip_by_global_norm", "concat", "conv2d", "conv2d_transpose",
    "dense", "elementwise", "elu", "exp", "gaussian_kl", "gaussian_nll", "load_checkpoint", "log",
    "matmul", "mul", "no_record", "reciprocal", "relu", "reparameterize", "reshape", "save_checkpoint",
    "sigmoid", "softplus", "split", "sqrt", "square", "stack", "sub", "tanh", "tmean", "tsum",
]
