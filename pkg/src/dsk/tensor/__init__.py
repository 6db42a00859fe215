from .engine import Gradients, ShapeError, Tape, Tensor, add, mul, scale, sub
from .nn import (
    add_channel_bias,
    concat_channels,
    conv1d_circular,
    gelu,
    group_norm,
    linear,
    take_positions,
    upsample_nearest,
)
from .checkpoint import load_tensors, save_tensors

__all__ = [
    "Tensor", "Tape", "Gradients", "ShapeError",
    "add", "sub", "mul", "scale",
    "gelu", "conv1d_circular", "group_norm", "linear",
    "concat_channels", "upsample_nearest", "take_positions", "add_channel_bias",
    "save_tensors", "load_tensors",
]
