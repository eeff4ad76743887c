"""Minimal reverse-mode engine with exactly the layers the U-Net needs."""

from .ops import (
    BN_EPSILON,
    BN_MOMENTUM,
    BatchNormState,
    batchnorm2d,
    concat_channels,
    conv2d,
    he_init,
    maxpool2,
    softmax_channels,
    spatial_dropout2d,
    swish,
    transposed_conv2d,
)
from .optim import Adam
from .tensor import Parameter, Tensor

__all__ = [
    "Adam",
    "BN_EPSILON",
    "BN_MOMENTUM",
    "BatchNormState",
    "Parameter",
    "Tensor",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "he_init",
    "maxpool2",
    "softmax_channels",
    "spatial_dropout2d",
    "swish",
    "transposed_conv2d",
]
