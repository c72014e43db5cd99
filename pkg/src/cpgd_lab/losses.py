"""Training objectives with analytic gradients.

Every loss here is a minimization objective over a batch of rollout groups.
Each one reduces to a per-token coefficient ``dL/d ln pi(y_t)`` that is
scattered through the score function ``(onehot(y_t) - p_t) (x) phi_t``, so
the gradient of any objective is one kernel call.

Stop-gradient quantities (the drift ratio, importance weights) are plain
numbers. ``sg_logp`` lets a caller pin the log-probs used for them, which
is how finite-difference checks hold them fixed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .advantage import (
    WEIGHTING_MODES,
    BatchStats,
    cpgd_weighted_advantage,
    global_norm,
    group_norm,
    reinforcepp_returns,
    rloo_advantage,
)
from .divergence import drift_coefficient, k3_from_log_ratio
from .policy import response_features

ALGORITHMS = ("cpgd", "cpg", "pgd", "pg", "ppo-clip", "dual-clip", "grpo", "grpo-drift",
              "rloo", "reinforce++")
PG_FAMILY = ("pg", "pgd", "cpg", "cpgd")
PPO_FAMILY = ("ppo-clip", "dual-clip", "grpo", "grpo-drift", "rloo", "reinforce++")
# beta enters the returns for these instead of an external k3 penalty
INTERNAL_KL = ("rloo", "reinforce++")


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss or gradient entry is inf/nan."""


@dataclass(frozen=True)
class LossConfig:
    algorithm: str = "cpgd"
    epsilon: float = 0.2
    schedule_lambda: float = 1.0
    alpha: float = 0.1
    beta: float = 0.0
    drift_cap: float = 2.0
    dual_clip: float = 3.0
    weighting: str = "std"
    c_omega: float = 4.0
    ppo_epochs: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.schedule_lambda <= 1.0:
            raise ValueError("schedule_lambda must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.drift_cap <= 0:
            raise ValueError("drift_cap must be positive")
        if self.algorithm == "dual-clip" and not self.dual_clip > 1 + self.epsilon:
            raise ValueError("dual_clip constant must exceed 1 + epsilon")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTING_MODES}")
        if self.c_omega <= 0:
            raise ValueError("c_omega must be positive")
        if self.ppo_epochs < 1:
            raise ValueError("ppo_epochs must be >= 1")


@dataclass
class RolloutGroup:
    """K responses to one prompt, flattened to token arrays.

    ``seg[t]`` is the response index of token ``t`` and ``position[t]`` its
    1-based index within that response.
    """

    prompt: tuple
    responses: list
    rewards: list
    feats: np.ndarray
    tokens: np.ndarray
    seg: np.ndarray
    position: np.ndarray
    lengths: np.ndarray
    old_logp: np.ndarray
    ref_logp: np.ndarray | None = None
    advantages: np.ndarray | None = None
    is_weights: np.ndarray | None = None

    @classmethod
    def build(cls, prompt, responses, rewards, old, ref=None, old_logp=None):
        if len(responses) != len(rewards):
            raise ValueError("one reward per response required")
        if any(len(r) == 0 for r in responses):
            raise ValueError("responses must be non-empty")
        feats = np.vstack([
            response_features(prompt, r, old.n_ctx, old.n_pos, old.n_vocab) for r in responses
        ])
        tokens = np.concatenate([np.asarray(r, dtype=np.int64) for r in responses])
        lengths = np.array([len(r) for r in responses], dtype=np.int64)
        seg = np.repeat(np.arange(len(responses)), lengths)
        position = np.concatenate([np.arange(1, n + 1) for n in lengths])
        if old_logp is None:
            old_logp, _ = kernels.token_logprobs(old.weights, feats, tokens)
        elif len(old_logp) != len(tokens):
            raise ValueError("old log-probs must align one-to-one with response tokens")
        ref_logp = None
        if ref is not None:
            ref_logp, _ = kernels.token_logprobs(ref.weights, feats, tokens)
        return cls(tuple(prompt), [tuple(r) for r in responses], list(rewards), feats, tokens,
                   seg, position, lengths, np.asarray(old_logp, dtype=np.float64), ref_logp)

    @property
    def k(self) -> int:
        return len(self.responses)

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def total_rewards(self) -> np.ndarray:
        return np.array([getattr(r, "total", r) for r in self.rewards], dtype=np.float64)


@dataclass
class LossReport:
    loss: float
    gradient: np.ndarray
    clip_fraction: float
    mean_ratio: float
    max_ratio: float
    drift_value: float
    n_tokens: int
    diagnostics: dict = field(default_factory=dict)


def epsilon_schedule(i, length, epsilon: float, lam: float):
    """Tight-to-loose clip width ``lam*eps + (1-lam)*eps*i/len`` (1-based ``i``)."""
    i = np.asarray(i, dtype=np.float64)
    if math.isinf(epsilon):
        out = np.full(i.shape, np.inf)
    else:
        out = lam * epsilon + (1.0 - lam) * epsilon * i / np.asarray(length, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def is_correction_weight(logp_prev, logp_old, epsilon: float, epoch: int = 2):
    """Truncated importance weight ``clip(pi_prev / pi_old, 1-eps, 1+eps)``; 1 on epoch 1."""
    if epoch <= 1:
        return np.ones(np.shape(logp_prev)) if np.ndim(logp_prev) else 1.0
    w = np.clip(np.exp(np.asarray(logp_prev, dtype=np.float64) - logp_old),
                1.0 - epsilon, 1.0 + epsilon)
    return w if np.ndim(logp_prev) else float(w)


# --- advantages -------------------------------------------------------------

def group_advantages(group: RolloutGroup, cfg: LossConfig, stats: BatchStats | None = None):
    """Response-level advantages for group-local schemes, broadcast to tokens."""
    rewards = group.total_rewards()
    if cfg.algorithm in PG_FAMILY or cfg.algorithm == "ppo-clip":
        if stats is None:
            stats = BatchStats.from_groups([rewards], cfg.c_omega)
        adv = cpgd_weighted_advantage(rewards, cfg.weighting, stats).values
    elif cfg.algorithm in ("grpo", "dual-clip", "grpo-drift"):
        adv = group_norm(rewards).values
    else:
        raise ValueError(f"{cfg.algorithm} advantages are batch-normalized; use assign_advantages")
    return adv[group.seg]


def _log_ratio_old_ref(group):
    if group.ref_logp is None:
        raise ValueError("beta > 0 needs reference log-probs on the rollout group")
    return group.old_logp - group.ref_logp


def assign_advantages(groups, cfg: LossConfig) -> None:
    """Fill ``group.advantages`` (per token) for a whole batch in place."""
    if cfg.algorithm in ("rloo", "reinforce++"):
        per_group = []
        for g in groups:
            rewards = g.total_rewards()
            if cfg.algorithm == "reinforce++":
                if cfg.beta > 0:
                    lr = _log_ratio_old_ref(g)
                    vals = np.concatenate([
                        reinforcepp_returns(rewards[k], lr[g.seg == k], cfg.beta)
                        for k in range(g.k)
                    ])
                else:
                    vals = rewards[g.seg]
            else:
                returns = rewards.copy()
                if cfg.beta > 0:
                    lr = _log_ratio_old_ref(g)
                    returns -= cfg.beta * np.bincount(g.seg, weights=lr, minlength=g.k)
                vals = rloo_advantage(returns).values[g.seg]
            per_group.append(vals)
        normed = global_norm(np.concatenate(per_group))
        offset = 0
        for g in groups:
            g.advantages = normed[offset: offset + g.n_tokens]
            offset += g.n_tokens
        return
    stats = BatchStats.from_groups([g.total_rewards() for g in groups], cfg.c_omega)
    for g in groups:
        g.advantages = group_advantages(g, cfg, stats)


# --- objectives -------------------------------------------------------------

@dataclass(frozen=True)
class _Objective:
    kind: str  # "pg" or "ppo"
    epsilon: float
    alpha: float
    dual: float | None
    beta_external: float


def resolve_objective(cfg: LossConfig) -> _Objective:
    alg = cfg.algorithm
    beta = 0.0 if alg in INTERNAL_KL else cfg.beta
    if alg in PG_FAMILY:
        eps = math.inf if alg in ("pg", "pgd") else cfg.epsilon
        alpha = cfg.alpha if alg in ("pgd", "cpgd") else 0.0
        return _Objective("pg", eps, alpha, None, beta)
    alpha = cfg.alpha if alg == "grpo-drift" else 0.0
    dual = cfg.dual_clip if alg == "dual-clip" else None
    return _Objective("ppo", cfg.epsilon, alpha, dual, beta)


def _log_bounds(eps_i):
    hi = np.log1p(eps_i)
    lo = np.full(eps_i.shape, -np.inf)
    inside = eps_i < 1.0
    lo[inside] = np.log1p(-eps_i[inside])
    return lo, hi


def _concat(groups, attr):
    return np.concatenate([getattr(g, attr) for g in groups])


def _evaluate(groups, params, cfg: LossConfig, obj: _Objective, sg_logp=None) -> LossReport:
    n_groups = len(groups)
    if n_groups == 0:
        raise ValueError("empty batch")
    for g in groups:
        if g.advantages is None:
            g.advantages = group_advantages(g, cfg)
    feats = np.vstack([g.feats for g in groups])
    tokens = _concat(groups, "tokens")
    old = _concat(groups, "old_logp")
    adv = _concat(groups, "advantages")
    lp, probs = kernels.token_logprobs(params.weights, feats, tokens)
    delta = lp - old
    n_tok = np.concatenate([np.full(g.n_tokens, g.n_tokens) for g in groups])
    k_tok = np.concatenate([np.full(g.n_tokens, g.k) for g in groups])
    len_tok = np.concatenate([g.lengths[g.seg] for g in groups])
    pos_tok = _concat(groups, "position")

    if obj.kind == "pg":
        a = adv
        if any(g.is_weights is not None for g in groups):
            a = adv * np.concatenate([
                g.is_weights if g.is_weights is not None else np.ones(g.n_tokens) for g in groups
            ])
        norm = 1.0 / (n_groups * n_tok)
        eps_i = epsilon_schedule(pos_tok, len_tok, obj.epsilon, cfg.schedule_lambda)
        lo, hi = _log_bounds(np.asarray(eps_i, dtype=np.float64))
        clipped = ((a > 0) & (delta > hi)) | ((a < 0) & (delta < lo))
        value = np.minimum(delta * a, np.clip(delta, lo, hi) * a)
        dvalue = np.where(clipped, 0.0, a)
        ratio = np.exp(delta)
    else:
        a = adv
        norm = 1.0 / (n_groups * k_tok * len_tok)
        ratio = np.exp(delta)
        eps = obj.epsilon
        clipped = ((a > 0) & (ratio > 1.0 + eps)) | ((a < 0) & (ratio < 1.0 - eps))
        value = np.minimum(ratio * a, np.clip(ratio, 1.0 - eps, 1.0 + eps) * a)
        dvalue = np.where(clipped, 0.0, a * ratio)
        if obj.dual is not None:
            dual_on = (a < 0) & (ratio > obj.dual)
            value = np.where(dual_on, obj.dual * a, value)
            dvalue = np.where(dual_on, 0.0, dvalue)
            clipped = clipped | dual_on

    drift_value = 0.0
    if obj.alpha > 0:
        d_sg = (lp if sg_logp is None else np.asarray(sg_logp, dtype=np.float64)) - old
        coef_d = drift_coefficient(d_sg, cfg.drift_cap)
        drift = coef_d * lp
        value = value - obj.alpha * drift
        dvalue = dvalue - obj.alpha * coef_d
        drift_value = float(np.sum(norm * drift))

    if obj.beta_external > 0:
        ref = _concat(groups, "ref_logp") if all(g.ref_logp is not None for g in groups) else None
        if ref is None:
            raise ValueError("beta > 0 needs reference log-probs on every rollout group")
        d_ref = ref - lp
        value = value - obj.beta_external * (np.expm1(d_ref) - d_ref)
        dvalue = dvalue + obj.beta_external * np.expm1(d_ref)

    coef = -norm * dvalue
    loss = -float(np.sum(norm * value))
    grad = kernels.scatter_grad(coef, feats, tokens, probs, params.n_features)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        bad = np.flatnonzero(~np.isfinite(coef) | ~np.isfinite(norm * value))
        where = []
        offset = 0
        for gi, g in enumerate(groups):
            for t in bad[(bad >= offset) & (bad < offset + g.n_tokens)] - offset:
                where.append((gi, int(g.seg[t]), int(g.position[t])))
            offset += g.n_tokens
        raise NonFiniteLossError(
            f"non-finite {cfg.algorithm} loss/gradient at (group, response, position) "
            f"{where[:5]}; max ratio {float(np.max(ratio)):.3g}"
        )
    return LossReport(
        loss=loss,
        gradient=grad,
        clip_fraction=float(np.mean(clipped)),
        mean_ratio=float(np.mean(ratio)),
        max_ratio=float(np.max(ratio)),
        drift_value=drift_value,
        n_tokens=int(tokens.shape[0]),
        diagnostics={
            "clipped": clipped,
            "token_coef": coef,
            "logp": lp,
            "k3_mean": float(np.mean(k3_from_log_ratio(-delta))),
        },
    )


def compute_loss(groups, params, cfg: LossConfig, sg_logp=None) -> LossReport:
    """Batch loss for ``cfg.algorithm``: mean over groups of each group's objective."""
    return _evaluate(list(groups), params, cfg, resolve_objective(cfg), sg_logp)


def _with_old(group, old):
    if group.old_logp is None:
        if old is None:
            raise ValueError("rollout group has no old log-probs and no old snapshot was given")
        group.old_logp, _ = kernels.token_logprobs(old.weights, group.feats, group.tokens)
    return group


def cpgd_loss(group, old, params, cfg: LossConfig, sg_logp=None) -> LossReport:
    """Full clipped policy-gradient loss with drift, using ``cfg``'s epsilon and alpha."""
    cfg = dataclasses.replace(cfg, algorithm="cpgd")
    return _evaluate([_with_old(group, old)], params, cfg, resolve_objective(cfg), sg_logp)


def pg_family_loss(group, old, params, cfg: LossConfig, sg_logp=None) -> LossReport:
    if cfg.algorithm not in PG_FAMILY:
        raise ValueError(f"{cfg.algorithm} is not one of {PG_FAMILY}")
    return _evaluate([_with_old(group, old)], params, cfg, resolve_objective(cfg), sg_logp)


def ppo_clip_loss(group, old, params, cfg: LossConfig, sg_logp=None) -> LossReport:
    """PPO-clip surrogate with the advantage scheme of ``cfg.algorithm``; never dual-clipped."""
    if cfg.algorithm not in PPO_FAMILY:
        raise ValueError(f"{cfg.algorithm} is not a ratio-based objective")
    obj = dataclasses.replace(resolve_objective(cfg), dual=None)
    return _evaluate([_with_old(group, old)], params, cfg, obj, sg_logp)


def dual_clip_loss(group, old, params, cfg: LossConfig, sg_logp=None) -> LossReport:
    if cfg.algorithm not in PPO_FAMILY:
        raise ValueError(f"{cfg.algorithm} is not a ratio-based objective")
    if not cfg.dual_clip > 1 + cfg.epsilon:
        raise ValueError("dual_clip constant must exceed 1 + epsilon")
    obj = dataclasses.replace(resolve_objective(cfg), dual=cfg.dual_clip)
    return _evaluate([_with_old(group, old)], params, cfg, obj, sg_logp)
