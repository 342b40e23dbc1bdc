"""Minimal double-precision neural network kernel with explicit backward passes."""
from . import checkpoint, functional
from .functional import bce_loss, mse_loss
from .gradcheck import gradcheck, gradcheck_function
from .layers import (
    LSTM,
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    Dense,
    Layer,
    ReLU,
    Sequential,
    Sigmoid,
    Tanh,
)
from .optim import Adam, adam_step

__all__ = [
    "Adam", "BatchNorm3d", "Conv3d", "ConvTranspose3d", "Dense", "LSTM", "Layer", "ReLU",
    "Sequential", "Sigmoid", "Tanh", "adam_step", "bce_loss", "checkpoint", "functional",
    "gradcheck", "gradcheck_function", "mse_loss",
]
