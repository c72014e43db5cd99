"""KL estimators and the clipped drift term.

Ratios are always formed as ``exp(logp_new - logp_old)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DRIFT_CAP = 2.0


@dataclass(frozen=True)
class RatioSample:
    logp_old: float
    logp_new: float

    @property
    def log_ratio(self) -> float:
        return self.logp_new - self.logp_old

    @property
    def ratio(self) -> float:
        return math.exp(self.log_ratio)


@dataclass(frozen=True)
class DriftTerm:
    value: float
    grad_coefficient: float
    cap: float


def k1_estimate(sample: RatioSample) -> float:
    """``ln(pi_old / pi_new)``; unbiased for forward KL, can be negative."""
    return sample.logp_old - sample.logp_new


def k3_estimate(sample: RatioSample) -> float:
    """``ratio - 1 - ln(ratio)``; unbiased and non-negative."""
    d = sample.log_ratio
    return max(math.expm1(d) - d, 0.0)


def k3_from_log_ratio(log_ratio) -> np.ndarray:
    d = np.asarray(log_ratio, dtype=np.float64)
    return np.maximum(np.expm1(d) - d, 0.0)


def drift_coefficient(log_ratio, cap: float) -> np.ndarray:
    """``min(ratio - 1, cap)``: the multiplier of grad ln pi in the drift gradient."""
    if cap <= 0:
        raise ValueError("drift cap must be positive")
    return np.minimum(np.expm1(np.asarray(log_ratio, dtype=np.float64)), cap)


def drift_term(sample: RatioSample, c: float = DEFAULT_DRIFT_CAP) -> DriftTerm:
    """Drift term with the ratio under stop-gradient.

    The value is ``min(ratio - 1, c) * logp_new``; its gradient is the same
    coefficient times grad ln pi, so once the ratio passes ``c + 1`` the
    push back toward the old policy has constant strength ``c``.
    """
    coef = float(drift_coefficient(sample.log_ratio, c))
    return DriftTerm(coef * sample.logp_new, coef, c)


def exact_kl(p, q) -> float:
    """``sum p ln(p / q)`` by direct summation."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same shape")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p is positive")
    return float(math.fsum(p[support] * (np.log(p[support]) - np.log(q[support]))))
