# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as ``cpgd_lab._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND = "cython"


def token_logprobs(const double[:, ::1] weights, feats, tokens):
    cdef const cnp.int64_t[:, ::1] f = np.ascontiguousarray(feats, dtype=np.int64)
    cdef const cnp.int64_t[::1] y = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t n_vocab = weights.shape[0]
    cdef Py_ssize_t n_slots = f.shape[1] if n > 0 else 0
    logp_arr = np.zeros(n, dtype=np.float64)
    probs_arr = np.zeros((n, n_vocab), dtype=np.float64)
    cdef double[::1] logp = logp_arr
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t t, v, j
    cdef double m, z, s
    for t in range(n):
        for v in range(n_vocab):
            s = 0.0
            for j in range(n_slots):
                s += weights[v, f[t, j]]
            probs[t, v] = s
        m = probs[t, 0]
        for v in range(1, n_vocab):
            if probs[t, v] > m:
                m = probs[t, v]
        z = 0.0
        for v in range(n_vocab):
            probs[t, v] = probs[t, v] - m
            z += exp(probs[t, v])
        logp[t] = probs[t, y[t]] - log(z)
        for v in range(n_vocab):
            probs[t, v] = exp(probs[t, v]) / z
    return logp_arr, probs_arr


def scatter_grad(coef, feats, tokens, const double[:, ::1] probs, Py_ssize_t n_features):
    cdef const double[::1] c = np.ascontiguousarray(coef, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] f = np.ascontiguousarray(feats, dtype=np.int64)
    cdef const cnp.int64_t[::1] y = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t n_vocab = probs.shape[1]
    cdef Py_ssize_t n_slots = f.shape[1] if n > 0 else 0
    grad_arr = np.zeros((n_vocab, n_features), dtype=np.float64)
    cdef double[:, ::1] g = grad_arr
    cdef Py_ssize_t t, v, j, col
    cdef double d
    for t in range(n):
        if c[t] == 0.0:
            continue
        for j in range(n_slots):
            col = f[t, j]
            for v in range(n_vocab):
                d = -c[t] * probs[t, v]
                if v == y[t]:
                    d = d + c[t]
                g[v, col] += d
    return grad_arr


def sample_batch(const double[:, ::1] weights, init_ctx, const double[:, ::1] uniforms,
                 double temperature, Py_ssize_t n_ctx, Py_ssize_t n_pos,
                 Py_ssize_t end_id, bint greedy=False):
    cdef Py_ssize_t n_vocab = weights.shape[0]
    cdef Py_ssize_t n_resp = uniforms.shape[0]
    cdef Py_ssize_t max_len = uniforms.shape[1]
    ctx_arr = np.array(init_ctx, dtype=np.int64, copy=True).reshape(n_resp, n_ctx)
    cdef cnp.int64_t[:, ::1] ctx = ctx_arr
    out_arr = np.full((n_resp, max_len), -1, dtype=np.int64)
    len_arr = np.zeros(n_resp, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.int64_t[::1] lengths = len_arr
    buf_arr = np.zeros(n_vocab, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef Py_ssize_t r, i, v, j, tok, pos_col
    cdef double m, z, acc, u, s
    for r in range(n_resp):
        for i in range(max_len):
            pos_col = n_ctx * (n_vocab + 1) + (i if i < n_pos - 1 else n_pos - 1)
            for v in range(n_vocab):
                s = 0.0
                for j in range(n_ctx):
                    s += weights[v, j * (n_vocab + 1) + ctx[r, j]]
                s += weights[v, pos_col]
                buf[v] = s
            if greedy:
                tok = 0
                for v in range(1, n_vocab):
                    if buf[v] > buf[tok]:
                        tok = v
            else:
                m = buf[0] / temperature
                for v in range(n_vocab):
                    buf[v] = buf[v] / temperature
                    if buf[v] > m:
                        m = buf[v]
                z = 0.0
                for v in range(n_vocab):
                    buf[v] = exp(buf[v] - m)
                    z += buf[v]
                u = uniforms[r, i]
                acc = 0.0
                tok = 0
                for v in range(n_vocab):
                    acc += buf[v] / z
                    if acc <= u:
                        tok += 1
                if tok > n_vocab - 1:
                    tok = n_vocab - 1
            out[r, i] = tok
            lengths[r] += 1
            if n_ctx > 0:
                for j in range(n_ctx - 1):
                    ctx[r, j] = ctx[r, j + 1]
                ctx[r, n_ctx - 1] = tok
            if tok == end_id:
                break
    return out_arr, len_arr
