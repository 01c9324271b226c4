from .tensor import (
    Parameter,
    Tensor,
    add,
    affine,
    attention,
    backward,
    broadcast_to,
    concat,
    get_tape,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    slice_,
    sub,
    swish,
    tanh,
    transpose,
)
from .layers import MLP, Attention, Block, LayerNorm, Linear, Module
from .optim import AdamW, OptimizerState, adamw_step, cosine_lr

__all__ = [
    "Tensor", "Parameter", "add", "sub", "mul", "matmul", "affine", "reshape", "transpose",
    "concat", "slice_", "broadcast_to", "mean", "swish", "tanh", "layer_norm", "attention", "mse",
    "backward", "no_grad", "get_tape", "Module", "Linear", "LayerNorm", "MLP", "Attention",
    "Block", "AdamW", "OptimizerState", "adamw_step", "cosine_lr",
]
