"""Advantage estimators.

All standard deviations are population standard deviations, and every
normalizing division adds ``EPS_STD`` so zero-variance groups map to zero
advantages instead of 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_STD = 1e-6
WEIGHTING_MODES = ("unprocessed", "equal", "std", "clip-filter")


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    mode: str
    omega: float = 1.0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class BatchStats:
    """Batch-level statistics consumed by the clip-filter weighting."""

    n_prompts: int
    n_nonzero_std: int
    c_omega: float = 4.0

    @classmethod
    def from_groups(cls, reward_groups, c_omega: float = 4.0) -> "BatchStats":
        n_nonzero = sum(1 for r in reward_groups if np.std(np.asarray(r, dtype=np.float64)) > 0)
        return cls(len(reward_groups), n_nonzero, c_omega)

    @property
    def clip_filter_omega(self) -> float:
        if self.n_nonzero_std == 0:
            return float(self.c_omega)
        return float(min(self.c_omega, self.n_prompts / self.n_nonzero_std))


def _as_group(rewards, what="group"):
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"{what} needs at least 2 values, got {r.size}")
    return r


def _std_scaled(r):
    centered = r - r.mean()
    denom = r.std() + EPS_STD
    return centered / denom, 1.0 / denom


def group_norm(rewards) -> AdvantageVector:
    """GRPO advantage ``(r - mean) / (std + EPS_STD)`` within one group."""
    values, omega = _std_scaled(_as_group(rewards))
    return AdvantageVector(values, "group-norm", omega)


def global_norm(values) -> np.ndarray:
    x = _as_group(values, "batch")
    return (x - x.mean()) / (x.std() + EPS_STD)


def rloo_advantage(returns) -> AdvantageVector:
    """Leave-one-out baseline: ``G_k`` minus the mean of the other ``K - 1`` returns."""
    g = _as_group(returns)
    k = g.size
    others = (g.sum() - g) / (k - 1)
    return AdvantageVector(g - others, "rloo")


def reinforcepp_returns(outcome: float, log_ratio_to_ref, beta: float) -> np.ndarray:
    """Per-token return ``R - beta * sum_{j >= i} ln(pi_old / pi_ref)``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    lr = np.asarray(log_ratio_to_ref, dtype=np.float64)
    if lr.ndim != 1:
        raise ValueError("log-ratio must be a 1-D per-token array")
    if beta == 0:
        return np.full(lr.shape, float(outcome))
    suffix = np.cumsum(lr[::-1])[::-1]
    return outcome - beta * suffix


def cpgd_weighted_advantage(rewards, mode: str = "std", stats: BatchStats | None = None) -> AdvantageVector:
    """Group-mean-centered reward scaled by a per-prompt weight."""
    if mode == "unprocessed":
        return unprocessed_advantage(rewards)
    r = _as_group(rewards)
    if mode == "std":
        values, omega = _std_scaled(r)
        return AdvantageVector(values, mode, omega)
    if mode == "equal":
        omega = 1.0
    elif mode == "clip-filter":
        if stats is None:
            raise ValueError("clip-filter weighting needs batch statistics")
        omega = stats.clip_filter_omega
    else:
        raise ValueError(f"unknown weighting mode {mode!r}; expected one of {WEIGHTING_MODES}")
    return AdvantageVector(omega * (r - r.mean()), mode, omega)


def unprocessed_advantage(rewards) -> AdvantageVector:
    return AdvantageVector(np.array(rewards, dtype=np.float64, copy=True), "unprocessed")
