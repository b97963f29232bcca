"""Kernel-basis-attention image restoration, from the tensor substrate up.

Self-contained: a minimal NCHW tensor layer with grouped convolution and
exact adjoints, the kernel-basis-attention operator, the multi-axis
feature-fusion block, a four-stage U-Net, and a deterministic training
harness -- no autodiff framework involved.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ImageFormatError,
    KbnetError,
    ShapeError,
)
from .net import NetConfig, build, count_macs, forward, named_params, pad_crop, unpad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "KbnetError",
    "ShapeError",
    "ConfigError",
    "CheckpointError",
    "ImageFormatError",
    "NetConfig",
    "TrainConfig",
    "build",
    "forward",
    "count_macs",
    "named_params",
    "pad_crop",
    "unpad",
    "train",
    "__version__",
]
