"""Minimal reverse-mode autodiff: tensors, graphs, layers and Adam."""

from .graph import (
    ComputeGraph,
    UnboundLeafError,
    evaluate,
    gradient,
    gradient_penalty,
    grad_check,
    graph_grad_check,
    input_gradient_norm,
)
from .nn import Conv2d, Linear, Module
from .optim import Adam, module_grads
from .tensor import (
    LOG_EPS,
    OP_REGISTRY,
    AutodiffError,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    affine,
    as_tensor,
    broadcast_to,
    col2im,
    concat,
    cos,
    cumsum,
    exp,
    grad,
    im2col,
    leaky_relu,
    log,
    mask_mul,
    matmul,
    mean,
    no_grad,
    power,
    relu,
    reshape,
    set_grad_enabled,
    sigmoid,
    sin,
    softplus,
    sqrt,
    square,
    sumpool2,
    tabs,
    tanh,
    transpose,
    tsum,
    upsample2,
)

__all__ = [
    "Adam", "AutodiffError", "ComputeGraph", "Conv2d", "LOG_EPS", "Linear", "Module",
    "OP_REGISTRY", "ShapeError", "Tensor", "UnboundLeafError", "UnsupportedOpError",
    "affine", "as_tensor", "broadcast_to", "col2im", "concat", "cos", "cumsum", "evaluate", "exp", "grad", "grad_check",
    "gradient", "gradient_penalty", "graph_grad_check", "im2col", "input_gradient_norm",
    "leaky_relu", "log", "mask_mul", "matmul", "mean", "module_grads", "no_grad", "power", "relu", "reshape",
    "set_grad_enabled", "sigmoid", "sin", "softplus", "sqrt", "tabs", "tanh", "transpose",
    "tsum", "upsample2",
]
