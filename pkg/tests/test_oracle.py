import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpgd_lab.oracle import (
    ExactSurrogate,
    _bandit_step,
    enumerate_expected_return,
    enumerate_policy,
    enumerate_response_space,
    enumerated_matches_autoregressive,
    exact_update_run,
    finite_diff_grad,
    max_relative_error,
    mc_estimator_error,
    verify_monotone_improvement,
    verify_ratio_ordering,
)
from cpgd_lab.policy import PolicyParams
from cpgd_lab.tasks import Task, canonical_response

PARITY = Task(kind="parity", min_items=1, max_items=2, max_response_len=3, f_bonus=0.0)


# --- finite differences -----------------------------------------------------------

def test_central_difference_exact_on_quadratic():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    w0 = np.array([[0.3, -0.2], [1.1, 0.4]])
    num = finite_diff_grad(lambda w: float(np.sum(a * w * w)), w0, h=1e-3)
    assert np.allclose(num, 2 * a * w0, atol=1e-9)


def test_central_difference_error_is_second_order():
    f = lambda w: float(np.sum(np.sin(w) * np.exp(w)))  # noqa: E731
    w0 = np.array([[0.3, 0.7]])
    true = np.cos(w0) * np.exp(w0) + np.sin(w0) * np.exp(w0)
    e1 = np.max(np.abs(finite_diff_grad(f, w0, h=1e-2) - true))
    e2 = np.max(np.abs(finite_diff_grad(f, w0, h=5e-3) - true))
    assert 3.5 < e1 / e2 < 4.5


def test_finite_difference_budget_and_step():
    with pytest.raises(ValueError, match="budget"):
        finite_diff_grad(lambda w: 0.0, np.zeros(10), budget=5)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda w: 0.0, np.zeros(2), h=0.0)


def test_relative_error_is_scale_relative():
    assert max_relative_error([1.0, 1e-9], [1.0, 2e-9]) == pytest.approx(1e-9)
    assert max_relative_error([0.0], [0.0]) == 0.0


# --- enumeration ------------------------------------------------------------------

def test_response_space_size():
    out = enumerate_response_space(3, 3, end=2)
    # END alone, one or two non-END tokens then END, or three non-END tokens
    assert len(out) == 1 + 2 + 4 + 8
    assert len(set(out)) == len(out)
    assert all(y[-1] == 2 or len(y) == 3 for y in out)
    with pytest.raises(ValueError, match="budget"):
        enumerate_response_space(10, 7, end=0)


@given(st.integers(0, 2**31 - 1))
def test_enumerated_probabilities_sum_to_one(seed):
    p = PolicyParams.random(4, 2, 3, 1.0, seed=seed)
    pol = enumerate_policy(p, (1, 2), 3, end=3)
    assert pol.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_enumeration_matches_autoregressive_products():
    p = PolicyParams.random(4, 2, 3, 1.0, seed=4)
    assert enumerated_matches_autoregressive(p, (0, 1), 3, 3) < 1e-12


def test_expected_return_of_near_deterministic_correct_policy():
    task = Task(kind="parity", min_items=1, max_items=1, max_response_len=2, f_bonus=0.0)
    prompt = (1,)
    p = PolicyParams.zeros(task.vocab.size, 2, 3)
    # force the canonical answer "1 END" with huge logits
    y = canonical_response(task, prompt, with_format=False)
    from cpgd_lab.policy import context_feature_vector
    for i, tok in enumerate(y):
        phi = context_feature_vector(p, prompt, y[:i])
        p.weights[tok] += 50.0 * phi
    assert enumerate_expected_return(p, task, prompt) == pytest.approx(1.0, abs=1e-12)
    uniform = PolicyParams.zeros(task.vocab.size, 2, 3)
    assert enumerate_expected_return(uniform, task, prompt) == pytest.approx(1 / 16, abs=1e-12)


def test_monte_carlo_converges_to_exact_within_four_sigma():
    old = PolicyParams.random(4, 2, 3, 0.5, seed=1)
    new = PolicyParams(old.weights + np.random.default_rng(2).normal(0, 0.2, old.weights.shape), 2, 3)
    rep = mc_estimator_error(old, new, (0, 1), sample_counts=(100, 2000), repeats=40, end=3)
    assert rep["k1_converges"] and rep["k3_converges"] and rep["var_ordering"]
    t = rep["table"]
    assert t[1]["k1_std"] < t[0]["k1_std"]
    assert t[1]["k3_std"] <= t[1]["k1_std"]


# --- one-step ratio ordering on the bandit ---------------------------------------------

def _closed_form_ratio(r0, sign, eta, scale):
    # two-action softmax with theta = (z, 0): one step changes the logit gap by 2*eta*A*scale*(1 - p0)
    p0 = 0.5 * r0
    z1 = math.log(p0 / (1 - p0)) + 2 * eta * sign * scale * (1 - p0)
    return 1.0 / (1.0 + math.exp(-z1)) / 0.5


@given(st.sampled_from(["upper", "lower"]), st.sampled_from([1, -1]), st.floats(1e-4, 50))
def test_bandit_step_matches_closed_form(side, sign, eta):
    r0, cpg, ppo = _bandit_step(side, sign, 0.2, eta)
    assert r0 == (1.2 if side == "upper" else 0.8)
    assert cpg == pytest.approx(_closed_form_ratio(r0, sign, eta, 1.0), rel=1e-12)
    assert ppo == pytest.approx(_closed_form_ratio(r0, sign, eta, r0), rel=1e-12)


def test_ratio_ordering_report_and_upper_cases():
    rep = verify_ratio_ordering(0.2)
    assert rep["zero_step_unchanged"]
    cases = {(c["side"], c["advantage_sign"]): c for c in rep["cases"]}
    assert set(cases) == {("upper", 1), ("upper", -1), ("lower", 1), ("lower", -1)}
    assert cases[("upper", 1)]["holds"] and cases[("upper", 1)]["eta_max_from_zero"] > 1.0
    assert cases[("upper", -1)]["holds"]
    lo, hi = cases[("upper", -1)]["eta_range"]
    assert 0.5 < lo < hi


def test_outward_step_below_band_is_smaller_for_ratio_weighting():
    # at ratio 1 - eps with a negative advantage both updates push the ratio further down,
    # and the ratio-weighted step is (1 - eps) times the log-ratio step
    for eta in np.geomspace(1e-3, 50, 40):
        _, cpg, ppo = _bandit_step("lower", -1, 0.2, float(eta))
        assert ppo < 0.8 and cpg < ppo
    rep = verify_ratio_ordering(0.2)
    case = next(c for c in rep["cases"] if (c["side"], c["advantage_sign"]) == ("lower", -1))
    assert case["outward"] and not case["holds"] and not case["ppo_exceeds_cpg_anywhere"]


def test_ratio_ordering_runs_fast():
    import time
    t0 = time.perf_counter()
    verify_ratio_ordering(0.2)
    assert time.perf_counter() - t0 < 10


# --- monotone improvement ---------------------------------------------------------------

def test_surrogate_gradient_matches_finite_differences():
    surr = ExactSurrogate(PARITY, 2, 3)
    w = PolicyParams.random(PARITY.vocab.size, 2, 3, 0.3, seed=1).weights
    ref = surr.space.seq_logp(w)
    w2 = w + np.random.default_rng(0).normal(0, 0.05, w.shape)
    _, g = surr.value_and_grad(w2, ref, 0.2, 0.1)
    num = finite_diff_grad(lambda x: surr.value_and_grad(x, ref, 0.2, 0.1)[0], w2, h=1e-6)
    assert max_relative_error(g, num) < 1e-5


def test_surrogate_value_and_kl_at_reference():
    surr = ExactSurrogate(PARITY, 2, 3)
    w = PolicyParams.random(PARITY.vocab.size, 2, 3, 0.3, seed=2).weights
    val, _ = surr.value_and_grad(w, surr.space.seq_logp(w), 0.2, 0.1)
    assert val == 0.0
    assert np.allclose(surr.kl(w, w), 0.0) and np.allclose(surr.policy_l1(w, w), 0.0)


def test_exact_updates_improve_monotonically_with_pinsker_margin():
    surr, seq, accepted = exact_update_run(PARITY, steps=20, alpha=0.1)
    rep = verify_monotone_improvement(surr, seq, 0.1, accepted)
    assert rep["n_accepted"] >= 15
    assert rep["holds"] and rep["monotone"] and not rep["violations"]
    assert rep["eta"][-1] > rep["eta"][0]


def test_monotone_check_detects_a_regression():
    surr, seq, _ = exact_update_run(PARITY, steps=6, alpha=0.1)
    rep = verify_monotone_improvement(surr, list(reversed(seq)), 0.1)
    assert not rep["holds"] and rep["violations"]
