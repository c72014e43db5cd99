"""Brute-force verifiers.

Nothing in here shares code paths with the quantities it checks beyond the
log-probability kernel: gradients are checked by central differences,
expectations by full enumeration of the response space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .divergence import exact_kl
from .policy import PolicyParams, response_features, token_distribution
from .tasks import Task, outcome_reward

ENUM_BUDGET = 10**6
FD_BUDGET = 2000


# --- finite differences -----------------------------------------------------

def finite_diff_grad(loss_fn, weights, h: float = 1e-5, budget: int = FD_BUDGET) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(weights)`` in float64."""
    if h <= 0:
        raise ValueError("step must be positive")
    w = np.array(weights, dtype=np.float64, copy=True)
    if w.size > budget:
        raise ValueError(f"{w.size} coordinates exceed the finite-difference budget {budget}")
    grad = np.zeros_like(w)
    flat = w.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(w)
        flat[i] = orig - h
        down = loss_fn(w)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """``max |a - n|`` relative to the largest gradient entry (``floor`` guards all-zero gradients).

    Scaling by the gradient's own magnitude rather than per entry keeps
    near-zero coordinates, where round-off dominates, from deciding the result.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n)) / scale)


# --- enumeration --------------------------------------------------------------

@dataclass
class EnumeratedPolicy:
    """Exact distribution over every response of at most ``max_len`` tokens.

    Responses either end with END or are unterminated at exactly
    ``max_len`` tokens, so the probabilities sum to one.
    """

    prompt: tuple
    responses: list
    logp: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)


def enumerate_response_space(n_vocab: int, max_len: int, end: int, budget: int = ENUM_BUDGET):
    if n_vocab ** max_len > budget:
        raise ValueError(f"V^L = {n_vocab}^{max_len} exceeds enumeration budget {budget}")
    out = []
    frontier = [()]
    for depth in range(1, max_len + 1):
        nxt = []
        for prefix in frontier:
            for tok in range(n_vocab):
                seq = prefix + (tok,)
                if tok == end or depth == max_len:
                    out.append(seq)
                else:
                    nxt.append(seq)
        frontier = nxt
    return out


class ResponseSpace:
    """Fixed enumeration of responses for a set of prompts, flattened to tokens.

    Re-evaluating sequence log-probs under new weights is one kernel call.
    """

    def __init__(self, prompts, n_vocab: int, n_ctx: int, n_pos: int, max_len: int, end: int,
                 budget: int = ENUM_BUDGET):
        self.prompts = [tuple(p) for p in prompts]
        self.responses = enumerate_response_space(n_vocab, max_len, end, budget)
        self.n_resp = len(self.responses)
        feats, tokens, seq = [], [], []
        for pi, prompt in enumerate(self.prompts):
            for ri, resp in enumerate(self.responses):
                feats.append(response_features(prompt, resp, n_ctx, n_pos, n_vocab))
                tokens.extend(resp)
                seq.extend([pi * self.n_resp + ri] * len(resp))
        self.feats = np.vstack(feats)
        self.tokens = np.array(tokens, dtype=np.int64)
        self.seq = np.array(seq, dtype=np.int64)
        self.n_features = n_ctx * (n_vocab + 1) + n_pos

    def token_logp(self, weights):
        return kernels.token_logprobs(weights, self.feats, self.tokens)

    def seq_logp(self, weights) -> np.ndarray:
        """Log-probabilities with shape ``(n_prompts, n_responses)``."""
        lp, _ = self.token_logp(weights)
        total = np.bincount(self.seq, weights=lp, minlength=len(self.prompts) * self.n_resp)
        return total.reshape(len(self.prompts), self.n_resp)

    def seq_grad(self, weights, seq_coef) -> np.ndarray:
        """``sum_{x,y} seq_coef[x, y] * grad ln pi(y | x)``."""
        _, probs = self.token_logp(weights)
        coef = np.asarray(seq_coef, dtype=np.float64).reshape(-1)[self.seq]
        return kernels.scatter_grad(coef, self.feats, self.tokens, probs, self.n_features)


def enumerate_policy(params, prompt, max_len: int, end: int, budget: int = ENUM_BUDGET) -> EnumeratedPolicy:
    space = ResponseSpace([prompt], params.n_vocab, params.n_ctx, params.n_pos, max_len, end, budget)
    return EnumeratedPolicy(tuple(prompt), space.responses, space.seq_logp(params.weights)[0])


def enumerate_expected_return(params, task: Task, prompt, max_len: int | None = None,
                              budget: int = ENUM_BUDGET) -> float:
    """Exact ``E_{y ~ pi(.|x)} R_o(x, y)`` by summing over every response."""
    max_len = task.max_response_len if max_len is None else max_len
    pol = enumerate_policy(params, prompt, max_len, task.vocab.end, budget)
    rewards = np.array([outcome_reward(task, prompt, y) for y in pol.responses], dtype=np.float64)
    return float(math.fsum(pol.probs * rewards))


def enumerated_matches_autoregressive(params, prompt, max_len, end, tol=1e-12) -> float:
    """Max deviation between enumerated probabilities and products of token distributions."""
    pol = enumerate_policy(params, prompt, max_len, end)
    worst = 0.0
    for y, lp in zip(pol.responses, pol.logp):
        direct = 0.0
        for i, tok in enumerate(y):
            direct += math.log(token_distribution(params, prompt, y[:i])[tok])
        worst = max(worst, abs(math.exp(direct) - math.exp(lp)))
    return worst


# --- one-step ratio deviation on a 2-action bandit ---------------------------

def _bandit_step(side: str, sign: int, epsilon: float, eta: float):
    """One ascent step from a point with ratio exactly ``1 +/- epsilon``.

    Old policy is uniform over two actions; the sampled action is 0 with
    advantage ``sign``. Returns the post-step ratios for the clip-free policy
    gradient (CPG at the boundary) and for the PPO surrogate.
    """
    p_old = 0.5
    r0 = 1.0 + epsilon if side == "upper" else 1.0 - epsilon
    p0 = p_old * r0
    theta0 = np.array([math.log(p0 / (1.0 - p0)), 0.0])
    pi0 = np.exp(theta0 - theta0.max())
    pi0 /= pi0.sum()
    score = np.array([1.0, 0.0]) - pi0
    adv = float(sign)
    ratios = {}
    for name, scale in (("cpg", 1.0), ("ppo", r0)):
        theta1 = theta0 + eta * adv * scale * score
        pi1 = np.exp(theta1 - theta1.max())
        pi1 /= pi1.sum()
        ratios[name] = pi1[0] / p_old
    return r0, ratios["cpg"], ratios["ppo"]


def _leading_range(grid, ok):
    """Largest grid value such that ``ok`` holds on every grid point up to it (None if none)."""
    best = None
    for eta, flag in zip(grid, ok):
        if not flag:
            break
        best = float(eta)
    return best


def verify_ratio_ordering(epsilon: float = 0.2, lr_grid=None) -> dict:
    """Check ``|r_PPO - 1| > |r_CPG - 1| > epsilon`` after one step, per boundary/sign case.

    Reports, per case, every grid learning rate where the full ordering
    holds, the leading range starting from the smallest step, and the two
    component inequalities separately.
    """
    grid = np.geomspace(1e-4, 1e2, 241) if lr_grid is None else np.asarray(lr_grid, dtype=float)
    cases = []
    for side in ("upper", "lower"):
        for sign in (1, -1):
            cpg_out, ppo_more, chain = [], [], []
            for eta in grid:
                _, r_cpg, r_ppo = _bandit_step(side, sign, epsilon, float(eta))
                a = abs(r_cpg - 1.0) > epsilon
                b = abs(r_ppo - 1.0) > abs(r_cpg - 1.0)
                cpg_out.append(bool(a and eta > 0))
                ppo_more.append(bool(b and eta > 0))
                chain.append(bool(a and b and eta > 0))
            holding = [float(e) for e, ok in zip(grid, chain) if ok]
            cases.append({
                "side": side,
                "advantage_sign": sign,
                "outward": (side == "upper") == (sign > 0),
                "holds": bool(holding),
                "eta_range": [min(holding), max(holding)] if holding else None,
                "eta_max_from_zero": _leading_range(grid, chain),
                "cpg_exceeds_eps_from_zero": _leading_range(grid, cpg_out),
                "ppo_exceeds_cpg_from_zero": _leading_range(grid, ppo_more),
                "ppo_exceeds_cpg_anywhere": any(ppo_more),
            })
    zero = [_bandit_step(s, g, epsilon, 0.0) for s in ("upper", "lower") for g in (1, -1)]
    return {
        "epsilon": epsilon,
        "grid": [float(grid[0]), float(grid[-1]), int(grid.size)],
        "cases": cases,
        "zero_step_unchanged": all(abs(c - r0) < 1e-15 and abs(p - r0) < 1e-15 for r0, c, p in zero),
        "all_cases_hold": all(c["holds"] for c in cases),
    }


# --- monotone improvement under exact surrogate updates ---------------------

class ExactSurrogate:
    """Sequence-level clipped objective with forward-KL drift, evaluated exactly.

    ``g(theta; theta_k) = sum_x D(x) [ E_{pi_k}[min(l R, clip(l) R)] - alpha KL(pi_k || pi_theta) ]``
    with ``l = ln pi_theta(y|x) - ln pi_k(y|x)`` and raw outcome rewards ``R``.
    """

    def __init__(self, task: Task, n_ctx: int = 2, n_pos: int = 4, prompts=None):
        self.task = task
        self.prompts = task.all_prompts() if prompts is None else [tuple(p) for p in prompts]
        v = task.vocab
        self.space = ResponseSpace(self.prompts, v.size, n_ctx, n_pos, task.max_response_len, v.end)
        self.rewards = np.array([[outcome_reward(task, x, y) for y in self.space.responses]
                                 for x in self.prompts], dtype=np.float64)
        self.d = np.full(len(self.prompts), 1.0 / len(self.prompts))

    def expected_return(self, weights) -> float:
        p = np.exp(self.space.seq_logp(weights))
        return float(np.sum(self.d * np.sum(p * self.rewards, axis=1)))

    def value_and_grad(self, weights, ref_logp, epsilon, alpha):
        lp = self.space.seq_logp(weights)
        pk = np.exp(ref_logp)
        l = lp - ref_logp
        lo, hi = math.log1p(-epsilon), math.log1p(epsilon)
        r = self.rewards
        phi = np.minimum(l * r, np.clip(l, lo, hi) * r)
        kl = np.sum(pk * (ref_logp - lp), axis=1)
        value = float(np.sum(self.d * (np.sum(pk * phi, axis=1) - alpha * kl)))
        clipped = (r > 0) & (l > hi)
        coef = self.d[:, None] * pk * (np.where(clipped, 0.0, r) + alpha)
        return value, self.space.seq_grad(weights, coef)

    def policy_l1(self, w_a, w_b) -> np.ndarray:
        return np.sum(np.abs(np.exp(self.space.seq_logp(w_a)) - np.exp(self.space.seq_logp(w_b))), axis=1)

    def kl(self, w_old, w_new) -> np.ndarray:
        a, b = self.space.seq_logp(w_old), self.space.seq_logp(w_new)
        return np.array([exact_kl(np.exp(a[i]), np.exp(b[i])) for i in range(len(self.prompts))])


def exact_update_run(task: Task, steps: int = 60, alpha: float = 0.1, epsilon: float = 0.2,
                     inner_steps: int = 5, step_size: float = 2.0, n_ctx: int = 2, n_pos: int = 4,
                     init_scale: float = 0.3, seed: int = 0):
    """Iterate exact surrogate maximization; each outer step is accepted only if it improves the surrogate.

    Returns ``(surrogate, weights_sequence, accepted_flags)``.
    """
    surr = ExactSurrogate(task, n_ctx, n_pos)
    params = PolicyParams.random(task.vocab.size, n_ctx, n_pos, init_scale, seed)
    w = params.weights.copy()
    seq = [w.copy()]
    accepted = []
    for _ in range(steps):
        ref = surr.space.seq_logp(w)
        base, _ = surr.value_and_grad(w, ref, epsilon, alpha)
        cand = w.copy()
        cur_val = base
        for _ in range(inner_steps):
            _, g = surr.value_and_grad(cand, ref, epsilon, alpha)
            s = step_size
            while s > 1e-8:
                trial = cand + s * g
                val, _ = surr.value_and_grad(trial, ref, epsilon, alpha)
                if np.isfinite(val) and val >= cur_val:
                    cand, cur_val = trial, val
                    break
                s *= 0.5
        ok = cur_val >= base
        accepted.append(bool(ok))
        if ok:
            w = cand
        seq.append(w.copy())
    return surr, seq, accepted


def verify_monotone_improvement(surr: ExactSurrogate, weights_seq, alpha: float, accepted=None,
                                slack: float = 1e-9) -> dict:
    """Check ``eta_{k+1} - eta_k >= (alpha/2) E_x ||pi_{k+1} - pi_k||_1^2`` step by step."""
    accepted = [True] * (len(weights_seq) - 1) if accepted is None else list(accepted)
    etas = [surr.expected_return(w) for w in weights_seq]
    rows = []
    violations = []
    skipped = []
    for k in range(len(weights_seq) - 1):
        gain = etas[k + 1] - etas[k]
        l1 = surr.policy_l1(weights_seq[k + 1], weights_seq[k])
        bound = 0.5 * alpha * float(np.sum(surr.d * l1 ** 2))
        rows.append({"k": k, "eta": etas[k], "gain": gain, "bound": bound,
                     "l1_mean": float(np.sum(surr.d * l1))})
        if not accepted[k]:
            skipped.append(k)
            continue
        if gain < bound - slack:
            violations.append(k)
    monotone = all(etas[k + 1] >= etas[k] - slack for k in range(len(etas) - 1) if accepted[k])
    return {
        "alpha": alpha,
        "n_steps": len(rows),
        "n_accepted": sum(accepted),
        "skipped": skipped,
        "violations": violations,
        "eta": etas,
        "steps": rows,
        "monotone": monotone,
        "holds": not violations and monotone,
    }


# --- KL estimators ------------------------------------------------------------

def estimator_moments(logp_old, logp_new) -> dict:
    """Exact mean and variance of k1 and k3 under ``pi_old`` over an enumerated support."""
    p = np.exp(logp_old)
    d = logp_new - logp_old
    k1 = -d
    k3 = np.maximum(np.expm1(d) - d, 0.0)
    kl = exact_kl(p, np.exp(logp_new))
    m1 = math.fsum(p * k1)
    m3 = math.fsum(p * k3)
    return {
        "exact_kl": kl,
        "mean_k1": m1,
        "mean_k3": m3,
        "var_k1": math.fsum(p * (k1 - m1) ** 2),
        "var_k3": math.fsum(p * (k3 - m3) ** 2),
        "min_k3": float(k3.min()),
    }


def mc_estimator_error(old_params, new_params, prompt, sample_counts=(10, 100, 1000, 10000),
                       repeats: int = 50, max_len: int = 3, end: int | None = None, seed: int = 0) -> dict:
    """Monte Carlo means of k1/k3 against the exact forward KL over enumerated responses."""
    end = old_params.n_vocab - 1 if end is None else end
    old = enumerate_policy(old_params, prompt, max_len, end)
    new = enumerate_policy(new_params, prompt, max_len, end)
    exact = estimator_moments(old.logp, new.logp)
    p = old.probs / old.probs.sum()
    d = new.logp - old.logp
    rng = np.random.default_rng(seed)
    table = []
    for n in sample_counts:
        means1, means3 = [], []
        for _ in range(repeats):
            idx = rng.choice(len(p), size=n, p=p)
            means1.append(float(np.mean(-d[idx])))
            means3.append(float(np.mean(np.maximum(np.expm1(d[idx]) - d[idx], 0.0))))
        table.append({
            "n": int(n),
            "k1_mean": float(np.mean(means1)), "k1_std": float(np.std(means1)),
            "k3_mean": float(np.mean(means3)), "k3_std": float(np.std(means3)),
        })
    last = table[-1]
    tol = lambda s: 4 * s / math.sqrt(repeats) + 1e-12  # noqa: E731
    return {
        **exact,
        "table": table,
        "k1_converges": abs(last["k1_mean"] - exact["exact_kl"]) <= tol(last["k1_std"]),
        "k3_converges": abs(last["k3_mean"] - exact["exact_kl"]) <= tol(last["k3_std"]),
        "var_ordering": exact["var_k3"] <= exact["var_k1"],
    }


# --- forward vs reverse KL gradients -----------------------------------------

def forward_reverse_gap(old_params, direction, prompt, scales, max_len: int = 3, end: int | None = None):
    """Residual of the second-order forward/reverse KL gradient relation.

    For ``theta = theta_old + s * direction`` returns, per scale ``s``,
    ``max|ratio - 1|`` and the norm of
    ``grad KL(pi_theta||pi_old) - grad KL(pi_old||pi_theta) - E_old[(ratio-1)^2/2 grad ln pi_theta]``.
    """
    end = old_params.n_vocab - 1 if end is None else end
    space = ResponseSpace([prompt], old_params.n_vocab, old_params.n_ctx, old_params.n_pos, max_len, end)
    lp_old = space.seq_logp(old_params.weights)[0]
    p_old = np.exp(lp_old)
    rows = []
    for s in scales:
        w = old_params.weights + s * np.asarray(direction)
        lp = space.seq_logp(w)[0]
        r = np.exp(lp - lp_old)
        # grad KL(pi||old) = sum pi (ln r + 1) grad ln pi ; grad KL(old||pi) = -sum old grad ln pi
        reverse = space.seq_grad(w, (p_old * r * (np.log(r) + 1.0))[None, :])
        forward = space.seq_grad(w, (-p_old)[None, :])
        approx = space.seq_grad(w, (0.5 * p_old * (r - 1.0) ** 2)[None, :])
        rows.append({
            "scale": float(s),
            "max_ratio_dev": float(np.max(np.abs(r - 1.0))),
            "residual": float(np.linalg.norm(reverse - forward - approx)),
            "approx_norm": float(np.linalg.norm(approx)),
        })
    return rows


# --- gradient checks on random small instances ---------------------------------

def random_loss_instance(algorithm: str, rng, n_vocab: int | None = None):
    """A random small batch (V <= 8, responses <= 4 tokens) with every loss branch reachable.

    Returns ``(groups, params, cfg, sg_logp)`` where ``sg_logp`` pins the
    stop-gradient log-probs at the current parameters.
    """
    from .losses import PG_FAMILY, LossConfig, RolloutGroup, assign_advantages
    from .policy import PolicySnapshot
    from .tasks import RewardBreakdown

    rng = np.random.default_rng(rng)
    v = int(rng.integers(3, 9)) if n_vocab is None else n_vocab
    n_ctx, n_pos = 2, 4
    base = PolicyParams.random(v, n_ctx, n_pos, 0.5, seed=int(rng.integers(2**31)))
    # the current policy sits a visible distance away from the sampling policy
    params = PolicyParams(base.weights + rng.normal(0.0, 0.6, base.weights.shape), n_ctx, n_pos)
    old = PolicySnapshot(base.weights, n_ctx, n_pos, "old")
    ref = PolicySnapshot(base.weights + rng.normal(0.0, 0.3, base.weights.shape), n_ctx, n_pos, "reference")
    beta = float(rng.choice([0.0, 0.05]))
    cfg = LossConfig(
        algorithm=algorithm,
        epsilon=float(rng.uniform(0.1, 0.3)),
        schedule_lambda=float(rng.choice([1.0, rng.uniform(0.0, 1.0)])),
        alpha=float(rng.uniform(0.05, 0.5)),
        beta=beta,
        drift_cap=float(rng.uniform(0.2, 2.0)),
        dual_clip=float(rng.uniform(1.4, 2.5)),
        weighting=str(rng.choice(["std", "equal", "clip-filter", "unprocessed"])),
    )
    groups = []
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(2, 5))
        prompt = tuple(int(t) for t in rng.integers(0, v, size=int(rng.integers(1, 4))))
        responses = [tuple(int(t) for t in rng.integers(0, v, size=int(rng.integers(1, 5))))
                     for _ in range(k)]
        rewards = [RewardBreakdown(int(rng.integers(0, 2)), float(rng.choice([0.0, 0.2])))
                   for _ in range(k)]
        groups.append(RolloutGroup.build(prompt, responses, rewards, old, ref if beta > 0 else None))
    assign_advantages(groups, cfg)
    if algorithm in PG_FAMILY and rng.random() < 0.5:
        for g in groups:
            g.is_weights = rng.uniform(1 - cfg.epsilon, 1 + cfg.epsilon, size=g.n_tokens)
    feats = np.vstack([g.feats for g in groups])
    tokens = np.concatenate([g.tokens for g in groups])
    sg_logp, _ = kernels.token_logprobs(params.weights, feats, tokens)
    return groups, params, cfg, sg_logp


def gradient_check(algorithm: str, n_instances: int = 20, seed: int = 0, h: float = 1e-6) -> dict:
    """Analytic loss gradients against central differences on random instances."""
    from .losses import compute_loss

    errors = []
    for i in range(n_instances):
        groups, params, cfg, sg = random_loss_instance(algorithm, [seed, i])
        analytic = compute_loss(groups, params, cfg, sg_logp=sg).gradient

        def loss_at(w, groups=groups, params=params, cfg=cfg, sg=sg):
            return compute_loss(groups, PolicyParams(w, params.n_ctx, params.n_pos), cfg, sg_logp=sg).loss

        numeric = finite_diff_grad(loss_at, params.weights, h)
        errors.append(max_relative_error(analytic, numeric))
    return {"algorithm": algorithm, "instances": n_instances, "max_rel_error": max(errors),
            "errors": errors}
