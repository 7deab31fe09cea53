"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .core import Parameter


@dataclass
class AdamState:
    """Per-parameter moment estimates and shared step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameter(cls, p: Parameter, beta1: float = 0.9, beta2: float = 0.999,
                      epsilon: float = 1e-8) -> "AdamState":
        return cls(
            m=np.zeros_like(p.value),
            v=np.zeros_like(p.value),
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Sequence[Parameter], states: Sequence[AdamState], lr: float) -> None:
    """One Adam update over all parameters, in place.

    With unit gradients on the first step the per-coordinate move is
    lr / (1 + epsilon) thanks to the bias correction.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(states):
        raise ValueError(f"{len(params)} parameters but {len(states)} optimizer states")
    for p, s in zip(params, states):
        if s.m.shape != p.value.shape:
            raise ValueError(
                f"optimizer state shape {s.m.shape} does not match parameter "
                f"{p.name!r} shape {p.value.shape}"
            )
        s.t += 1
        g = p.grad
        s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
        s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
        mhat = s.m / (1.0 - s.beta1 ** s.t)
        vhat = s.v / (1.0 - s.beta2 ** s.t)
        p.value -= (lr * mhat / (np.sqrt(vhat) + s.epsilon)).astype(p.value.dtype, copy=False)


def init_states(params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                epsilon: float = 1e-8) -> List[AdamState]:
    return [AdamState.for_parameter(p, beta1, beta2, epsilon) for p in params]
