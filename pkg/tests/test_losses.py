import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpgd_lab.advantage import group_norm
from cpgd_lab.losses import (
    ALGORITHMS,
    PG_FAMILY,
    PPO_FAMILY,
    LossConfig,
    NonFiniteLossError,
    RolloutGroup,
    assign_advantages,
    compute_loss,
    cpgd_loss,
    dual_clip_loss,
    epsilon_schedule,
    is_correction_weight,
    pg_family_loss,
    ppo_clip_loss,
)
from cpgd_lab.oracle import gradient_check, random_loss_instance
from cpgd_lab.policy import PolicyParams, grad_logprob_token, snapshot
from cpgd_lab.tasks import RewardBreakdown


def _group(seed=0, rewards=(1, 0, 0, 1), v=5):
    rng = np.random.default_rng(seed)
    params = PolicyParams.random(v, 2, 4, 0.5, seed=seed)
    old = snapshot(params)
    responses = [tuple(int(t) for t in rng.integers(0, v, size=int(rng.integers(1, 5))))
                 for _ in rewards]
    group = RolloutGroup.build((0, 1), responses, [RewardBreakdown(r, 0.0) for r in rewards], old)
    return group, old, params


def _moved(params, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    return PolicyParams(params.weights + rng.normal(0, scale, params.weights.shape), params.n_ctx,
                        params.n_pos)


def _plain_pg_gradient(group, params, adv, norm):
    """Minimization gradient of -sum norm * A * ln pi over every token."""
    g = np.zeros_like(params.weights)
    t = 0
    for y in group.responses:
        for i, tok in enumerate(y):
            g -= norm[t] * adv[t] * grad_logprob_token(params, group.prompt, y[:i], tok)
            t += 1
    return g


# --- schedules and weights -----------------------------------------------------

def test_epsilon_schedule_examples():
    assert epsilon_schedule(3, 7, 0.2, 1.0) == pytest.approx(0.2)
    assert epsilon_schedule(8, 8, 0.2, 0.5) == pytest.approx(0.2)
    assert epsilon_schedule(4, 8, 0.2, 0.5) == pytest.approx(0.15)


@given(st.integers(1, 20), st.floats(0.01, 0.5), st.floats(0, 1))
def test_epsilon_schedule_monotone(n, eps, lam):
    vals = epsilon_schedule(np.arange(1, n + 1), n, eps, lam)
    assert np.all(np.diff(vals) >= -1e-15)
    assert vals[-1] == pytest.approx(eps)


def test_is_weight_examples():
    assert is_correction_weight(-0.3, -1.0, 0.2, epoch=1) == 1.0
    assert is_correction_weight(math.log(1.5), 0.0, 0.2) == pytest.approx(1.2)
    assert is_correction_weight(math.log(0.9), 0.0, 0.2) == pytest.approx(0.9)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 0.9))
def test_is_weight_range(a, b, eps):
    w = is_correction_weight(a, b, eps)
    assert 1 - eps - 1e-12 <= w <= 1 + eps + 1e-12


def test_config_validation():
    with pytest.raises(ValueError, match="unknown algorithm"):
        LossConfig(algorithm="trpo")
    with pytest.raises(ValueError):
        LossConfig(algorithm="dual-clip", dual_clip=1.1)
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(schedule_lambda=1.5)


def test_group_build_validation():
    _, old, _ = _group()
    with pytest.raises(ValueError):
        RolloutGroup.build((0,), [(1,), (2,)], [1], old)
    with pytest.raises(ValueError):
        RolloutGroup.build((0,), [(1,), ()], [1, 0], old)


# --- behaviour at the trust-region centre ---------------------------------------

def test_zero_advantage_gives_zero_loss_and_gradient():
    group, old, params = _group(rewards=(1, 1, 1, 1))
    rep = cpgd_loss(group, old, params, LossConfig())
    assert rep.loss == 0.0
    assert not rep.gradient.any()


def test_drift_vanishes_at_old_policy():
    group, old, params = _group()
    rep = cpgd_loss(group, old, params, LossConfig(alpha=0.5))
    assert rep.drift_value == 0.0
    no_drift = cpgd_loss(group, old, params, LossConfig(alpha=0.0))
    assert np.array_equal(rep.gradient, no_drift.gradient)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_gradient_at_old_policy_is_plain_policy_gradient(algorithm):
    group, old, params = _group(seed=3, rewards=(1, 0, 0, 1, 0))
    cfg = LossConfig(algorithm=algorithm, alpha=0.3)
    assign_advantages([group], cfg)
    rep = compute_loss([group], params, cfg)
    if algorithm in PG_FAMILY:
        norm = np.full(group.n_tokens, 1.0 / group.n_tokens)
    else:
        norm = 1.0 / (group.k * group.lengths[group.seg])
    expected = _plain_pg_gradient(group, params, group.advantages, norm)
    assert np.allclose(rep.gradient, expected, atol=1e-12)
    assert rep.clip_fraction == 0.0 and rep.max_ratio == pytest.approx(1.0)


# --- clip semantics ---------------------------------------------------------------

def test_clipped_tokens_contribute_no_surrogate_gradient():
    group, old, params = _group(seed=5, rewards=(1, 0, 1, 0, 0))
    moved = _moved(params, scale=0.8)
    for alg in ("cpg", "ppo-clip", "grpo", "dual-clip"):
        cfg = LossConfig(algorithm=alg)
        rep = compute_loss([group], moved, cfg)
        clipped = rep.diagnostics["clipped"]
        assert clipped.any()
        assert np.all(rep.diagnostics["token_coef"][clipped] == 0.0)
        assert rep.clip_fraction == pytest.approx(clipped.mean())


def test_ppo_positive_advantage_above_band_is_clipped():
    params = PolicyParams.zeros(3, 1, 2)
    old = snapshot(params)
    group = RolloutGroup.build((0,), [(1,), (2,)], [1.0, 0.0], old)
    moved = params.copy()
    moved.weights[1, :] += 1.0  # raises token 1, whose advantage is positive
    rep = ppo_clip_loss(group, old, moved, LossConfig(algorithm="ppo-clip", weighting="equal"))
    ratio = math.exp(rep.diagnostics["logp"][0] - group.old_logp[0])
    assert ratio > 1.5
    assert rep.diagnostics["clipped"][0]
    assert rep.diagnostics["token_coef"][0] == 0.0


def _negative_token_case(ratio, v=4):
    """Token 1 has advantage -1 and current/old probability ``ratio``."""
    # one slot plus one position column are active, so a row value w gives logit 2w
    def row_for(p):
        return math.log(p * (v - 1) / (1 - p)) / 2

    params = PolicyParams.zeros(v, 1, 1)
    params.weights[1, :] = row_for(0.01)
    old = snapshot(params)
    group = RolloutGroup.build((0,), [(1,), (2,)], [0.0, 1.0], old)
    group.advantages = np.array([-1.0, 0.0])
    moved = params.copy()
    moved.weights[1, :] = row_for(0.01 * ratio)
    return group, old, moved


def test_dual_clip_zeroes_large_ratio_negative_advantage():
    group, old, moved = _negative_token_case(5.0)
    cfg = LossConfig(algorithm="dual-clip", dual_clip=3.0)
    rep = dual_clip_loss(group, old, moved, cfg)
    assert math.exp(rep.diagnostics["logp"][0] - group.old_logp[0]) == pytest.approx(5.0)
    assert rep.diagnostics["token_coef"][0] == 0.0
    plain = ppo_clip_loss(group, old, moved, cfg)
    assert plain.diagnostics["token_coef"][0] != 0.0


def test_dual_clip_inactive_below_constant_matches_ppo():
    group, old, moved = _negative_token_case(2.0)
    cfg = LossConfig(algorithm="dual-clip", dual_clip=3.0)
    a = dual_clip_loss(group, old, moved, cfg)
    b = ppo_clip_loss(group, old, moved, cfg)
    assert a.loss == b.loss and np.array_equal(a.gradient, b.gradient)


def test_dual_clip_never_alters_positive_advantages():
    group, old, params = _group(seed=8, rewards=(1, 0, 1, 0))
    moved = _moved(params, scale=2.0)
    cfg = LossConfig(algorithm="dual-clip", dual_clip=1.5)
    assign_advantages([group], cfg)
    group.advantages = np.abs(group.advantages)
    a = dual_clip_loss(group, old, moved, cfg)
    b = ppo_clip_loss(group, old, moved, cfg)
    assert a.loss == b.loss and np.array_equal(a.gradient, b.gradient)


def test_ppo_negative_advantage_is_unbounded_in_ratio():
    lo = ppo_clip_loss(*_negative_token_case(2.0), LossConfig(algorithm="ppo-clip"))
    hi = ppo_clip_loss(*_negative_token_case(8.0), LossConfig(algorithm="ppo-clip"))
    assert hi.diagnostics["token_coef"][0] == pytest.approx(4 * lo.diagnostics["token_coef"][0])


def test_drift_cap_in_loss_gradient():
    # a token far above the cap gets drift coefficient exactly c, pushing its log-prob down
    group, old, moved = _negative_token_case(8.0)
    group.advantages = np.zeros(2)
    cfg = LossConfig(algorithm="cpgd", alpha=1.0, drift_cap=2.0)
    rep = compute_loss([group], moved, cfg)
    norm = 1.0 / group.n_tokens
    assert rep.diagnostics["token_coef"][0] == pytest.approx(norm * 1.0 * 2.0)


# --- reductions ---------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_reduction_lattice_bit_exact(seed):
    group, old, params = _group(seed=seed, rewards=(1, 0, 0, 1, 1))
    moved = _moved(params, seed=seed, scale=0.7)
    base = LossConfig(alpha=0.4, epsilon=0.2)

    def run(**kw):
        return compute_loss([group], moved, dataclasses.replace(base, **kw))

    pg = run(algorithm="pg")
    for other in (run(algorithm="cpgd", alpha=0.0, epsilon=math.inf),
                  run(algorithm="cpg", epsilon=math.inf),
                  run(algorithm="pgd", alpha=0.0)):
        assert other.loss == pg.loss and np.array_equal(other.gradient, pg.gradient)
    cpg = run(algorithm="cpg")
    assert np.array_equal(run(algorithm="cpgd", alpha=0.0).gradient, cpg.gradient)
    pgd = run(algorithm="pgd")
    assert np.array_equal(run(algorithm="cpgd", epsilon=math.inf).gradient, pgd.gradient)


def test_cpg_equals_pg_when_ratios_inside_band():
    group, old, params = _group(seed=2)
    moved = _moved(params, scale=0.01)
    cpg = pg_family_loss(group, old, moved, LossConfig(algorithm="cpg"))
    pg = pg_family_loss(group, old, moved, LossConfig(algorithm="pg"))
    assert cpg.clip_fraction == 0.0
    assert np.array_equal(cpg.gradient, pg.gradient)


def test_std_weighted_pg_advantage_is_grpo_advantage():
    group, _, _ = _group(seed=4, rewards=(1, 0, 0, 0))
    assign_advantages([group], LossConfig(algorithm="cpgd", weighting="std"))
    a = group.advantages.copy()
    assign_advantages([group], LossConfig(algorithm="grpo"))
    assert np.array_equal(a, group.advantages)
    assert np.array_equal(a, group_norm([1, 0, 0, 0]).values[group.seg])


def test_weighting_linearity_in_gradient():
    group, _, params = _group(seed=6, rewards=(1, 0, 0, 1))
    moved = _moved(params, scale=0.5)
    cfg = LossConfig(algorithm="cpg", weighting="equal")
    assign_advantages([group], cfg)
    g1 = compute_loss([group], moved, cfg).gradient
    group.advantages = 3.0 * group.advantages
    g3 = compute_loss([group], moved, cfg).gradient
    assert np.allclose(g3, 3.0 * g1, rtol=1e-12, atol=1e-15)


def test_ppo_loss_requires_ratio_algorithm():
    group, old, params = _group()
    with pytest.raises(ValueError):
        ppo_clip_loss(group, old, params, LossConfig(algorithm="cpgd"))
    with pytest.raises(ValueError):
        pg_family_loss(group, old, params, LossConfig(algorithm="grpo"))


def test_reference_needed_when_beta_positive():
    group, old, params = _group()
    with pytest.raises(ValueError, match="reference"):
        compute_loss([group], params, LossConfig(algorithm="grpo", beta=0.1))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_gradient_reports_coordinates():
    group, old, params = _group()
    group.advantages = np.full(group.n_tokens, np.inf)
    with pytest.raises(NonFiniteLossError, match="group, response, position"):
        compute_loss([group], params, LossConfig(algorithm="pg"))


# --- finite differences ---------------------------------------------------------------

@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_gradient_matches_finite_differences(algorithm):
    report = gradient_check(algorithm, n_instances=6, seed=100)
    assert report["max_rel_error"] < 1e-5


def test_random_instances_cover_both_families():
    assert set(PG_FAMILY) | set(PPO_FAMILY) == set(ALGORITHMS)
    groups, params, cfg, sg = random_loss_instance("cpgd", 0)
    assert all(g.advantages is not None for g in groups)
    assert sg.shape == (sum(g.n_tokens for g in groups),)
