import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpgd_lab.advantage import (
    EPS_STD,
    BatchStats,
    cpgd_weighted_advantage,
    global_norm,
    group_norm,
    reinforcepp_returns,
    rloo_advantage,
    unprocessed_advantage,
)

groups = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=10)


def test_group_norm_one_success_in_four():
    adv = group_norm([1, 0, 0, 0]).values
    std = math.sqrt(0.1875)
    expected = np.array([0.75, -0.25, -0.25, -0.25]) / (std + EPS_STD)
    assert np.allclose(adv, expected, atol=1e-15)
    assert adv == pytest.approx([1.73204, -0.57735, -0.57735, -0.57735], abs=1e-5)


def test_group_norm_constant_and_pair():
    assert not group_norm([0.3] * 5).values.any()
    assert group_norm([1, 0]).values == pytest.approx([1.0, -1.0], abs=1e-4)


def test_group_norm_needs_two():
    with pytest.raises(ValueError):
        group_norm([1.0])


def test_global_norm():
    assert global_norm([2, 4]) == pytest.approx([-1, 1], abs=1e-4)
    assert not global_norm([7, 7, 7]).any()
    with pytest.raises(ValueError):
        global_norm([1])


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=40))
def test_global_norm_centers(values):
    assert abs(global_norm(values).mean()) < 1e-9


def test_rloo_examples():
    assert rloo_advantage([1, 0, 0, 0]).values == pytest.approx([1, -1 / 3, -1 / 3, -1 / 3], abs=1e-15)
    assert not rloo_advantage([2.0] * 4).values.any()
    with pytest.raises(ValueError):
        rloo_advantage([1])


@given(groups)
def test_rloo_identity_and_zero_sum(g):
    g = np.array(g)
    k = g.size
    adv = rloo_advantage(g).values
    assert np.allclose(adv, k / (k - 1) * (g - g.mean()), atol=1e-12, rtol=0)
    assert abs(adv.sum()) < 1e-9


def test_reinforcepp_returns():
    assert reinforcepp_returns(1.0, [0.3, -0.2, 0.5], 0.0) == pytest.approx([1, 1, 1])
    assert reinforcepp_returns(1.0, [0.2, 0.4], 0.1) == pytest.approx([0.94, 0.96], abs=1e-12)
    with pytest.raises(ValueError):
        reinforcepp_returns(1.0, [[0.1]], 0.1)
    with pytest.raises(ValueError):
        reinforcepp_returns(1.0, [0.1], -1.0)


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8), st.floats(0, 2))
def test_reinforcepp_telescoping(lr, beta):
    g = reinforcepp_returns(0.5, lr, beta)
    assert np.allclose(g[:-1] - g[1:], -beta * np.array(lr[:-1]), atol=1e-12)
    assert g[-1] == pytest.approx(0.5 - beta * lr[-1], abs=1e-12)


def test_cpgd_weighting_examples():
    assert cpgd_weighted_advantage([1, 0], "equal").values == pytest.approx([0.5, -0.5])
    std = cpgd_weighted_advantage([1, 0, 0, 0], "std").values
    assert np.array_equal(std, group_norm([1, 0, 0, 0]).values)
    stats = BatchStats(n_prompts=8, n_nonzero_std=2, c_omega=3.0)
    assert stats.clip_filter_omega == 3.0
    adv = cpgd_weighted_advantage([1, 0], "clip-filter", stats)
    assert adv.omega == 3.0 and adv.values == pytest.approx([1.5, -1.5])


def test_clip_filter_weight_without_signal_uses_cap():
    assert BatchStats(8, 0, 4.0).clip_filter_omega == 4.0
    assert BatchStats(8, 4, 4.0).clip_filter_omega == 2.0
    assert BatchStats.from_groups([[1, 0], [1, 1], [0, 0], [0, 1]], 4.0).n_nonzero_std == 2


def test_clip_filter_requires_stats_and_mode_validated():
    with pytest.raises(ValueError):
        cpgd_weighted_advantage([1, 0], "clip-filter")
    with pytest.raises(ValueError):
        cpgd_weighted_advantage([1, 0], "median")


def test_unprocessed_is_identity():
    r = np.array([1.0, 0.0, 0.0, 0.0])
    out = unprocessed_advantage(r).values
    assert np.array_equal(out, r) and out is not r
    assert np.array_equal(unprocessed_advantage([1, 1, 1]).values, [1, 1, 1])
    assert np.array_equal(cpgd_weighted_advantage(r, "unprocessed").values, r)


@given(groups)
def test_std_weighting_is_group_norm_bit_exact(g):
    assert np.array_equal(cpgd_weighted_advantage(g, "std").values, group_norm(g).values)


@given(groups, st.sampled_from(["equal", "std", "clip-filter"]))
def test_mean_centered_modes_sum_to_zero(g, mode):
    stats = BatchStats(4, 1, 4.0)
    adv = cpgd_weighted_advantage(g, mode, stats)
    assert abs(adv.values.sum() / adv.omega) < 1e-9


@given(groups, st.floats(0.01, 100))
def test_weight_linearity(g, scale):
    # with no signal-bearing prompts the clip-filter weight equals its cap
    weighted = cpgd_weighted_advantage(g, "clip-filter", BatchStats(8, 0, scale))
    assert weighted.omega == scale
    assert np.array_equal(weighted.values, scale * cpgd_weighted_advantage(g, "equal").values)
