"""Minimal float64 layer kit with hand-written backward passes."""

from .checkpoint import CheckpointError, load_checkpoint, load_into, params_to_tensors, save_checkpoint
from .gradcheck import check_gradients, grad_check, numeric_grad, relative_error
from .layers import (
    LSTM,
    BackwardStateError,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    Layer,
    Parameter,
    ReLU,
    Reshape,
    Sequential,
    ShapeError,
    Sigmoid,
    Tanh,
    sigmoid,
    zero_grad,
)
from .losses import gaussian_kl, mse
from .optim import Adam

__all__ = [
    "Adam", "BackwardStateError", "CheckpointError", "Conv2d", "ConvTranspose2d", "Dense",
    "Flatten", "LSTM", "Layer", "Parameter", "ReLU", "Reshape", "Sequential", "ShapeError",
    "Sigmoid", "Tanh", "check_gradients", "gaussian_kl", "grad_check", "load_checkpoint",
    "load_into", "mse", "numeric_grad", "params_to_tensors", "relative_error", "save_checkpoint",
    "sigmoid", "zero_grad",
]
