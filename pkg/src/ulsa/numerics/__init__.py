from .autodiff import (
    Node,
    adaptive_avg_pool,
    add,
    as_node,
    backward,
    concat,
    constant,
    conv2d,
    cosine_similarity,
    detach,
    instance_norm,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean_,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    sum_,
    upsample_nearest,
    zero_grad,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import max_relative_error

__all__ = [
    "Node",
    "adaptive_avg_pool",
    "add",
    "as_node",
    "backward",
    "concat",
    "constant",
    "conv2d",
    "cosine_similarity",
    "detach",
    "instance_norm",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "mean_",
    "mul",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum_",
    "upsample_nearest",
    "zero_grad",
    "load_checkpoint",
    "save_checkpoint",
    "max_relative_error",
]
