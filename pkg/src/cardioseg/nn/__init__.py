"""Minimal dense-tensor layer engine.

All operations work on plain numpy arrays laid out as
``[batch, channel, depth, height, width]`` (rank up to 5), keep the
input's dtype (float32 for training, float64 for gradient checking)
and are pure single-threaded functions, so runs are bit-reproducible.
"""

from .core import Parameter, zero_grads
from .functional import (
    conv3d_forward,
    conv3d_backward,
    conv3d_transpose_forward,
    conv3d_transpose_backward,
    maxpool3d_forward,
    maxpool3d_backward,
    batchnorm3d_forward,
    batchnorm3d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    dice_loss,
)
from .optim import AdamState, adam_step
from .gradcheck import GradCheckResult, gradient_check

__all__ = [
    "Parameter",
    "zero_grads",
    "conv3d_forward",
    "conv3d_backward",
    "conv3d_transpose_forward",
    "conv3d_transpose_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "batchnorm3d_forward",
    "batchnorm3d_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "dice_loss",
    "AdamState",
    "adam_step",
    "GradCheckResult",
    "gradient_check",
]
