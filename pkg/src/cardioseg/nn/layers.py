"""Layer objects: parameters plus cached state for the backward pass.

Each layer caches what its backward needs during forward; backward
consumes the cache, accumulates parameter gradients and returns the
gradient with respect to its input.  No computation graph — the network
wires layers explicitly.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .core import Parameter

Triple = Tuple[int, int, int]


class Conv3d:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: Triple, stride: Triple = (1, 1, 1), padding: str = "same",
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        kd, kh, kw = kernel
        fan_in = in_channels * kd * kh * kw
        std = np.sqrt(2.0 / fan_in)
        if rng is None:
            w = np.zeros((out_channels, in_channels, kd, kh, kw), dtype=dtype)
        else:
            w = rng.normal(0.0, std, (out_channels, in_channels, kd, kh, kw)).astype(dtype)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._x = None

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return F.conv3d_forward(x, self.weight.value, self.bias.value,
                                self.stride, self.padding)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = F.conv3d_backward(grad_out, self._x, self.weight.value,
                                       self.stride, self.padding)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        self._x = None
        return gx


class ConvTranspose3d:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 stride: Triple = (2, 2, 2),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.stride = stride
        kd, kh, kw = stride  # kernel extents match the upsampling factor
        fan_in = in_channels * kd * kh * kw
        std = np.sqrt(2.0 / fan_in)
        if rng is None:
            w = np.zeros((in_channels, out_channels, kd, kh, kw), dtype=dtype)
        else:
            w = rng.normal(0.0, std, (in_channels, out_channels, kd, kh, kw)).astype(dtype)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._x = None

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return F.conv3d_transpose_forward(x, self.weight.value, self.bias.value, self.stride)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = F.conv3d_transpose_backward(grad_out, self._x, self.weight.value, self.stride)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        self._x = None
        return gx


class BatchNorm3d:
    def __init__(self, name: str, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        mode = "train" if train else "eval"
        y, cache, rm, rv = F.batchnorm3d_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var,
            mode=mode, eps=self.eps, momentum=self.momentum,
        )
        if train:
            self.running_mean, self.running_var = rm, rv
            self._cache = cache
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, dgamma, dbeta = F.batchnorm3d_backward(grad_out, self._cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        self._cache = None
        return gx


class ReLU:
    def __init__(self):
        self._x = None

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return F.relu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx = F.relu_backward(grad_out, self._x)
        self._x = None
        return gx


class MaxPool3d:
    def __init__(self, window: Triple = (2, 2, 2)):
        self.window = window
        self._argmax = None
        self._in_shape = None

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y, argmax = F.maxpool3d_forward(x, self.window)
        if train:
            self._argmax = argmax
            self._in_shape = x.shape
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx = F.maxpool3d_backward(grad_out, self._argmax, self._in_shape)
        self._argmax = None
        return gx
