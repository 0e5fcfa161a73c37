from .tensor import (
    DTYPE,
    GraphError,
    ShapeError,
    Tensor,
    absolute,
    add,
    concat,
    conv1d,
    conv2d,
    div,
    exp,
    gather_rows,
    global_avg_pool1d,
    global_avg_pool2d,
    hardswish,
    log,
    matmul,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    tmean,
    transpose,
    tsum,
)
from .layers import (
    Activation,
    BatchNorm1d,
    BatchNorm2d,
    Conv1d,
    Conv2d,
    Linear,
    Module,
    ModuleList,
)

__all__ = [
    "DTYPE", "GraphError", "ShapeError", "Tensor",
    "absolute", "add", "concat", "conv1d", "conv2d", "div", "exp",
    "gather_rows", "global_avg_pool1d", "global_avg_pool2d", "hardswish",
    "log", "matmul", "mul", "power", "relu", "reshape", "sigmoid",
    "softmax", "softplus", "sub", "tmean", "transpose", "tsum",
    "Activation", "BatchNorm1d", "BatchNorm2d", "Conv1d", "Conv2d",
    "Linear", "Module", "ModuleList",
]
