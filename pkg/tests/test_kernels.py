import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpgd_lab import kernels
from cpgd_lab.policy import n_features, response_features

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def _instance(seed):
    rng = np.random.default_rng(seed)
    v, n_ctx, n_pos = int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    w = rng.normal(0, 1.5, (v, n_features(v, n_ctx, n_pos)))
    prompt = rng.integers(0, v, size=int(rng.integers(1, 4)))
    resp = rng.integers(0, v, size=int(rng.integers(1, 7)))
    feats = response_features(prompt, resp, n_ctx, n_pos, v)
    return rng, w, feats, resp.astype(np.int64), n_ctx, n_pos


def test_backend_is_selected():
    assert kernels.BACKEND in BACKENDS


@given(st.integers(0, 2**31 - 1))
def test_reference_logprobs_normalized(seed):
    _, w, feats, tokens, *_ = _instance(seed)
    logp, probs = BACKENDS["python"].token_logprobs(w, feats, tokens)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.exp(logp), probs[np.arange(len(tokens)), tokens], rtol=1e-12)


@needs_compiled
@given(st.integers(0, 2**31 - 1))
def test_compiled_logprobs_and_gradients_match_reference(seed):
    rng, w, feats, tokens, *_ = _instance(seed)
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    lp_a, pr_a = py.token_logprobs(w, feats, tokens)
    lp_b, pr_b = cy.token_logprobs(w, feats, tokens)
    assert np.allclose(lp_a, lp_b, atol=1e-12, rtol=0)
    assert np.allclose(pr_a, pr_b, atol=1e-12, rtol=0)
    coef = rng.normal(size=len(tokens))
    g_a = py.scatter_grad(coef, feats, tokens, pr_a, w.shape[1])
    g_b = cy.scatter_grad(coef, feats, tokens, pr_b, w.shape[1])
    assert g_a.shape == g_b.shape == w.shape
    assert np.allclose(g_a, g_b, atol=1e-12, rtol=0)


@needs_compiled
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_compiled_sampler_matches_reference(seed, greedy):
    rng, w, _, _, n_ctx, n_pos = _instance(seed)
    v = w.shape[0]
    init = rng.integers(0, v + 1, size=(12, n_ctx))
    u = rng.random((12, 5))
    end = int(rng.integers(0, v))
    a = BACKENDS["python"].sample_batch(w, init, u, 1.0, n_ctx, n_pos, end, greedy)
    b = BACKENDS["cython"].sample_batch(w, init, u, 1.0, n_ctx, n_pos, end, greedy)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_compiled
def test_compiled_kernels_accept_read_only_weights():
    _, w, feats, tokens, *_ = _instance(3)
    w.setflags(write=False)
    lp, _ = BACKENDS["cython"].token_logprobs(w, feats, tokens)
    assert np.all(np.isfinite(lp))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_empty_inputs(name):
    k = BACKENDS[name]
    w = np.zeros((3, n_features(3, 1, 1)))
    lp, probs = k.token_logprobs(w, np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    assert lp.shape == (0,) and probs.shape == (0, 3)
    g = k.scatter_grad(np.zeros(0), np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                       probs, w.shape[1])
    assert g.shape == w.shape and not g.any()
