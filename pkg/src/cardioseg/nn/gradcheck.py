"""Central finite-difference checking of analytic gradients.

The function under test maps a dict of named float64 arrays to a scalar
plus its analytic gradients.  Every coordinate is perturbed by
h = 1e-4 * max(1, |x|) and the symmetric difference quotient is compared
against the analytic value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

ScalarFn = Callable[[Mapping[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool

    def __str__(self) -> str:
        tag = "ok" if self.passed else "FAIL"
        return f"{self.name}: max rel err {self.max_rel_error:.3e} [{tag}]"


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradient_check(
    fn: ScalarFn,
    inputs: Mapping[str, np.ndarray],
    tolerance: float = 1e-5,
) -> List[GradCheckResult]:
    """Compare fn's analytic gradients against central differences.

    All inputs must be float64; the scalar produced by fn must be finite.
    Returns one result per named input tensor.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    value, grads = fn(work)
    if not np.isfinite(value):
        raise ValueError(f"forward value is not finite: {value}")
    missing = set(work) - set(grads)
    if missing:
        raise ValueError(f"fn returned no gradient for {sorted(missing)}")

    results = []
    for name, x in work.items():
        analytic = grads[name]
        if analytic.shape != x.shape:
            raise ValueError(
                f"analytic gradient shape {analytic.shape} for {name!r} "
                f"does not match input shape {x.shape}"
            )
        worst = 0.0
        flat = x.ravel()
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-4 * max(1.0, abs(orig))
            flat[i] = orig + h
            fp, _ = fn(work)
            flat[i] = orig - h
            fm, _ = fn(work)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_error(float(analytic.ravel()[i]), numeric))
        results.append(GradCheckResult(name, worst, worst <= tolerance))
    return results
