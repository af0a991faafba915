"""Minimal differentiable kernels: conv, batch norm, dense, ReLU, dropout,
MAPE loss, and Adam."""

from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    ReLU,
    conv2d_forward,
    conv2d_input_grad,
    dropout,
    he_uniform,
    same_padding,
)
from .losses import mape_loss
from .optim import Adam

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "Dropout",
    "Flatten",
    "ReLU",
    "conv2d_forward",
    "conv2d_input_grad",
    "dropout",
    "he_uniform",
    "mape_loss",
    "same_padding",
]
