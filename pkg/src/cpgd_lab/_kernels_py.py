"""Pure-numpy reference kernels.

Feature layout shared with the compiled kernels: a context is encoded as
``n_ctx`` token slots followed by one position-bucket slot. Slot ``j`` of
token ``t`` maps to column ``j * (V + 1) + t`` (``t == V`` is padding) and the
position bucket ``b`` maps to column ``n_ctx * (V + 1) + b``.
"""

import numpy as np

BACKEND = "python"


def token_logprobs(weights, feats, tokens):
    """Log-probability of each chosen token and the full distribution.

    Parameters
    ----------
    weights : (V, F) float64
    feats : (T, J) int64 active feature columns per token
    tokens : (T,) int64

    Returns
    -------
    logp : (T,) float64
    probs : (T, V) float64
    """
    feats = np.asarray(feats, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, weights.shape[0]))
    logits = np.zeros((n, weights.shape[0]))
    wt = weights.T
    for j in range(feats.shape[1]):
        logits += wt[feats[:, j]]
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    z = expd.sum(axis=1)
    probs = expd / z[:, None]
    logp = logits[np.arange(n), tokens] - np.log(z)
    return logp, probs


def scatter_grad(coef, feats, tokens, probs, n_features):
    """Accumulate ``sum_t coef[t] * (onehot(tokens[t]) - probs[t]) (x) phi_t``.

    Returns a (V, F) gradient matrix.
    """
    coef = np.asarray(coef, dtype=np.float64)
    n, n_vocab = probs.shape
    grad_t = np.zeros((n_features, n_vocab))
    if n == 0:
        return grad_t.T.copy()
    diff = -coef[:, None] * probs
    diff[np.arange(n), tokens] += coef
    for j in range(feats.shape[1]):
        np.add.at(grad_t, feats[:, j], diff)
    return np.ascontiguousarray(grad_t.T)


def sample_batch(weights, init_ctx, uniforms, temperature, n_ctx, n_pos, end_id, greedy=False):
    """Ancestral sampling for R independent responses.

    ``init_ctx`` holds the last ``n_ctx`` prompt tokens per response (padding
    id ``V`` where the prompt is shorter). Token ``i`` of response ``r`` is the
    first index whose running CDF exceeds ``uniforms[r, i]``.

    Returns ``(tokens, lengths)``; unused tail entries of ``tokens`` are -1.
    """
    n_vocab = weights.shape[0]
    n_resp, max_len = uniforms.shape
    ctx = np.array(init_ctx, dtype=np.int64, copy=True).reshape(n_resp, n_ctx)
    out = np.full((n_resp, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n_resp, dtype=np.int64)
    alive = np.ones(n_resp, dtype=bool)
    slot_offset = np.arange(n_ctx, dtype=np.int64) * (n_vocab + 1)
    wt = weights.T
    for i in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        logits = np.zeros((idx.size, n_vocab))
        for j in range(n_ctx):
            logits += wt[slot_offset[j] + ctx[idx, j]]
        logits += wt[n_ctx * (n_vocab + 1) + min(i, n_pos - 1)]
        if greedy:
            tok = np.argmax(logits, axis=1)
        else:
            logits = logits / temperature
            logits -= logits.max(axis=1, keepdims=True)
            expd = np.exp(logits)
            probs = expd / expd.sum(axis=1)[:, None]
            cdf = np.cumsum(probs, axis=1)
            tok = np.minimum((cdf <= uniforms[idx, i][:, None]).sum(axis=1), n_vocab - 1)
        out[idx, i] = tok
        lengths[idx] += 1
        if n_ctx > 0:
            ctx[idx, :-1] = ctx[idx, 1:]
            ctx[idx, -1] = tok
        alive[idx[tok == end_id]] = False
    return out, lengths
