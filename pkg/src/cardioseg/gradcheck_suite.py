"""Finite-difference verification cases for every layer in the engine.

Each case wraps a layer in a scalar map f(x) = sum(R * layer(x)) with a
fixed random weighting R, so the analytic backward pass can be compared
against central differences coordinate by coordinate.  Inputs are drawn
to stay away from non-differentiable points (relu kinks, pooling ties,
probability bounds).
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .nn import functional as F
from .nn.gradcheck import GradCheckResult, gradient_check


def _weighted(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0, shape)


def _away_from_zero(rng: np.random.Generator, shape, margin=0.1, span=2.0) -> np.ndarray:
    mag = rng.uniform(margin, span, shape)
    sign = rng.choice([-1.0, 1.0], shape)
    return mag * sign


def _tie_free(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values with gaps >> the finite-difference step."""
    flat = rng.permutation(int(np.prod(shape))).astype(np.float64)
    return (flat * 0.37 - flat.mean() * 0.37).reshape(shape)


def check_conv3d(rng, tolerance) -> List[GradCheckResult]:
    x = rng.normal(0, 1, (1, 2, 3, 4, 4))
    w = rng.normal(0, 0.5, (2, 2, 3, 3, 3))
    b = rng.normal(0, 0.5, (2,))
    r = _weighted(rng, (1, 2, 3, 4, 4))

    def fn(t):
        y = F.conv3d_forward(t["input"], t["weight"], t["bias"])
        gx, gw, gb = F.conv3d_backward(r, t["input"], t["weight"])
        return float((r * y).sum()), {"input": gx, "weight": gw, "bias": gb}

    out = gradient_check(fn, {"input": x, "weight": w, "bias": b}, tolerance)
    return [GradCheckResult(f"conv3d.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


def check_conv3d_transpose(rng, tolerance) -> List[GradCheckResult]:
    x = rng.normal(0, 1, (1, 2, 2, 3, 3))
    w = rng.normal(0, 0.5, (2, 2, 2, 2, 2))
    b = rng.normal(0, 0.5, (2,))
    stride = (2, 2, 2)
    r = _weighted(rng, (1, 2, 4, 6, 6))

    def fn(t):
        y = F.conv3d_transpose_forward(t["input"], t["weight"], t["bias"], stride)
        gx, gw, gb = F.conv3d_transpose_backward(r, t["input"], t["weight"], stride)
        return float((r * y).sum()), {"input": gx, "weight": gw, "bias": gb}

    out = gradient_check(fn, {"input": x, "weight": w, "bias": b}, tolerance)
    return [GradCheckResult(f"conv3d_transpose.{r_.name}", r_.max_rel_error, r_.passed)
            for r_ in out]


def check_maxpool(rng, tolerance) -> List[GradCheckResult]:
    x = _tie_free(rng, (1, 2, 2, 4, 4))
    r = _weighted(rng, (1, 2, 1, 2, 2))

    def fn(t):
        y, argmax = F.maxpool3d_forward(t["input"], (2, 2, 2))
        gx = F.maxpool3d_backward(r, argmax, t["input"].shape)
        return float((r * y).sum()), {"input": gx}

    out = gradient_check(fn, {"input": x}, tolerance)
    return [GradCheckResult(f"maxpool3d.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


def check_batchnorm(rng, tolerance) -> List[GradCheckResult]:
    x = rng.normal(0, 1, (2, 3, 2, 3, 3))
    gamma = rng.uniform(0.5, 1.5, (3,))
    beta = rng.normal(0, 0.5, (3,))
    r = _weighted(rng, (2, 3, 2, 3, 3))

    def fn(t):
        y, cache, _, _ = F.batchnorm3d_forward(t["input"], t["gamma"], t["beta"],
                                               mode="train")
        gx, dgamma, dbeta = F.batchnorm3d_backward(r, cache)
        return float((r * y).sum()), {"input": gx, "gamma": dgamma, "beta": dbeta}

    out = gradient_check(fn, {"input": x, "gamma": gamma, "beta": beta}, tolerance)
    return [GradCheckResult(f"batchnorm3d.{r_.name}", r_.max_rel_error, r_.passed)
            for r_ in out]


def check_relu(rng, tolerance) -> List[GradCheckResult]:
    x = _away_from_zero(rng, (2, 3, 2, 3, 3))
    r = _weighted(rng, x.shape)

    def fn(t):
        y = F.relu(t["input"])
        return float((r * y).sum()), {"input": F.relu_backward(r, t["input"])}

    out = gradient_check(fn, {"input": x}, tolerance)
    return [GradCheckResult(f"relu.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


def check_sigmoid(rng, tolerance) -> List[GradCheckResult]:
    x = rng.normal(0, 2, (2, 3, 2, 3, 3))
    r = _weighted(rng, x.shape)

    def fn(t):
        y = F.sigmoid(t["input"])
        return float((r * y).sum()), {"input": F.sigmoid_backward(r, y)}

    out = gradient_check(fn, {"input": x}, tolerance)
    return [GradCheckResult(f"sigmoid.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


def check_dice(rng, tolerance) -> List[GradCheckResult]:
    shape = (1, 3, 2, 4, 4)
    probs = rng.uniform(0.05, 0.95, shape)
    labels = rng.integers(0, 3, shape[2:])
    target = np.zeros(shape)
    for c in range(3):
        target[0, c] = labels == c

    def fn(t):
        loss, grad = F.dice_loss(t["probs"], target)
        return loss, {"probs": grad}

    out = gradient_check(fn, {"probs": probs}, tolerance)
    return [GradCheckResult(f"dice_loss.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


def check_composite(rng, tolerance) -> List[GradCheckResult]:
    """conv3d -> relu -> sigmoid -> dice on a random patch, input grads only."""
    x = rng.normal(0, 1, (1, 2, 4, 8, 8))
    w = rng.normal(0, 0.3, (3, 2, 3, 3, 3))
    b = rng.normal(0, 0.1, (3,))
    labels = rng.integers(0, 3, (4, 8, 8))
    target = np.zeros((1, 3, 4, 8, 8))
    for c in range(3):
        target[0, c] = labels == c

    def fn(t):
        z = F.conv3d_forward(t["input"], w, b)
        a = F.relu(z)
        p = F.sigmoid(a)
        loss, dp = F.dice_loss(p, target)
        da = F.sigmoid_backward(dp, p)
        dz = F.relu_backward(da, z)
        gx, _, _ = F.conv3d_backward(dz, t["input"], w)
        return loss, {"input": gx}

    out = gradient_check(fn, {"input": x}, tolerance)
    return [GradCheckResult(f"composite.{r_.name}", r_.max_rel_error, r_.passed) for r_ in out]


_CHECKS = [
    check_conv3d,
    check_conv3d_transpose,
    check_maxpool,
    check_batchnorm,
    check_relu,
    check_sigmoid,
    check_dice,
]


def run_suite(tolerance: float = 1e-5, cases: int = 5, seed: int = 0,
              composite: bool = True) -> List[GradCheckResult]:
    """`cases` random draws through every layer check, plus one composite."""
    results: List[GradCheckResult] = []
    for check in _CHECKS:
        for case in range(cases):
            rng = np.random.default_rng([seed, _CHECKS.index(check), case])
            results.extend(check(rng, tolerance))
    if composite:
        results.extend(check_composite(np.random.default_rng([seed, 99]), tolerance))
    return results
