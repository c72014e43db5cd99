"""Log-linear autoregressive token policy.

The logits for the next token are ``W @ phi(context)``, where ``phi`` one-hot
encodes the last ``n_ctx`` tokens of ``prompt + prefix`` (one block of
``V + 1`` columns per slot, the extra column being padding) followed by a
one-hot bucket for the response position. Because ``phi`` is sparse, every
quantity is computed from a handful of weight columns, and the score
function has the closed form ``(onehot(y) - p) (x) phi``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

_MAGIC = b"CPGDLAB-POLICY v1"


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory of a task. ``names[i]`` is the display name of id ``i``."""

    names: tuple[str, ...]
    end: int
    format: int

    def __post_init__(self):
        if len(self.names) < 3:
            raise ValueError("vocabulary needs at least 3 tokens")
        for tok in (self.end, self.format):
            if not 0 <= tok < len(self.names):
                raise ValueError(f"special token id {tok} outside [0, {len(self.names)})")

    @property
    def size(self) -> int:
        return len(self.names)

    def render(self, tokens: Sequence[int]) -> str:
        return " ".join(self.names[t] for t in tokens)


def n_features(n_vocab: int, n_ctx: int, n_pos: int) -> int:
    return n_ctx * (n_vocab + 1) + n_pos


@dataclass
class PolicyParams:
    """Mutable weight matrix of shape ``(V, F)`` plus the feature-map shape."""

    weights: np.ndarray
    n_ctx: int = 2
    n_pos: int = 8
    seed: int = 0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        expected = n_features(self.weights.shape[0], self.n_ctx, self.n_pos)
        if self.weights.shape[1] != expected:
            raise ValueError(
                f"weights have {self.weights.shape[1]} columns, feature map needs {expected}"
            )

    @classmethod
    def zeros(cls, n_vocab: int, n_ctx: int = 2, n_pos: int = 8, seed: int = 0) -> "PolicyParams":
        return cls(np.zeros((n_vocab, n_features(n_vocab, n_ctx, n_pos))), n_ctx, n_pos, seed)

    @classmethod
    def random(cls, n_vocab: int, n_ctx: int = 2, n_pos: int = 8, scale: float = 0.1,
               seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        w = scale * rng.standard_normal((n_vocab, n_features(n_vocab, n_ctx, n_pos)))
        return cls(w, n_ctx, n_pos, seed)

    @property
    def n_vocab(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "PolicyParams":
        return dataclasses.replace(self, weights=self.weights.copy())


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of a policy used as the sampling (``old``) or reference policy."""

    weights: np.ndarray
    n_ctx: int
    n_pos: int
    tag: str
    seed: int = 0

    @property
    def n_vocab(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]


def snapshot(params, tag: str = "old") -> PolicySnapshot:
    if tag not in ("old", "reference"):
        raise ValueError(f"unknown snapshot tag {tag!r}")
    w = np.array(params.weights, dtype=np.float64, copy=True)
    w.setflags(write=False)
    return PolicySnapshot(w, params.n_ctx, params.n_pos, tag, getattr(params, "seed", 0))


def _check_tokens(tokens, n_vocab):
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= n_vocab):
        bad = arr[(arr < 0) | (arr >= n_vocab)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {n_vocab}")
    return arr


def context_slots(prompt, prefix, n_ctx: int, n_vocab: int) -> np.ndarray:
    """Last ``n_ctx`` tokens of ``prompt + prefix``, left-padded with id ``V``."""
    seq = list(prompt) + list(prefix)
    tail = seq[-n_ctx:] if n_ctx else []
    return np.array([n_vocab] * (n_ctx - len(tail)) + tail, dtype=np.int64)


def response_features(prompt, response, n_ctx: int, n_pos: int, n_vocab: int) -> np.ndarray:
    """Active feature columns for every position of ``response``; shape ``(len, n_ctx + 1)``."""
    prompt = list(prompt)
    response = list(response)
    padded = np.array([n_vocab] * n_ctx + prompt + response, dtype=np.int64)
    start = n_ctx + len(prompt)
    n = len(response)
    feats = np.empty((n, n_ctx + 1), dtype=np.int64)
    for j in range(n_ctx):
        # slot j of position i holds token at absolute index start + i - n_ctx + j
        feats[:, j] = j * (n_vocab + 1) + padded[start - n_ctx + j: start - n_ctx + j + n]
    feats[:, n_ctx] = n_ctx * (n_vocab + 1) + np.minimum(np.arange(n), n_pos - 1)
    return feats


def context_feature_vector(params, prompt, prefix=()) -> np.ndarray:
    """Dense ``phi(context)`` for the position right after ``prefix``."""
    phi = np.zeros(params.n_features)
    slots = context_slots(prompt, prefix, params.n_ctx, params.n_vocab)
    for j, tok in enumerate(slots):
        phi[j * (params.n_vocab + 1) + tok] = 1.0
    phi[params.n_ctx * (params.n_vocab + 1) + min(len(prefix), params.n_pos - 1)] += 1.0
    return phi


def token_logits(params, prompt, prefix=()) -> np.ndarray:
    logits = params.weights @ context_feature_vector(params, prompt, prefix)
    if not np.all(np.isfinite(logits)):
        row = int(np.flatnonzero(~np.isfinite(logits))[0])
        raise FloatingPointError(f"non-finite logit from weight row {row}")
    return logits


def token_distribution(params, prompt, prefix=()) -> np.ndarray:
    """Next-token distribution given ``prompt`` and the response ``prefix`` so far."""
    _check_tokens(list(prompt) + list(prefix), params.n_vocab)
    logits = token_logits(params, prompt, prefix)
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def token_logprobs(params, prompt, response) -> np.ndarray:
    """Per-token log-probabilities of ``response`` (kernel-backed)."""
    tokens = _check_tokens(response, params.n_vocab)
    _check_tokens(prompt, params.n_vocab)
    feats = response_features(prompt, tokens, params.n_ctx, params.n_pos, params.n_vocab)
    logp, _ = kernels.token_logprobs(params.weights, feats, tokens)
    if not np.all(np.isfinite(logp)):
        raise FloatingPointError("non-finite log-probability; weights contain inf or nan")
    return logp


def logprob_sequence(params, prompt, response) -> float:
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    return float(math.fsum(token_logprobs(params, prompt, response)))


def grad_logprob_token(params, prompt, prefix, token: int) -> np.ndarray:
    """Gradient of ``ln pi(token | prompt, prefix)`` w.r.t. the weight matrix."""
    _check_tokens([token], params.n_vocab)
    p = token_distribution(params, prompt, prefix)
    e = np.zeros_like(p)
    e[token] = 1.0
    return np.outer(e - p, context_feature_vector(params, prompt, prefix))


def sample_response(params, prompt, max_len: int, temperature: float = 1.0, rng=None,
                    end: int | None = None) -> tuple[int, ...]:
    """Ancestral sampling until ``end`` or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(rng)
    end_id = -1 if end is None else end
    u = rng.random((1, max_len))
    init = context_slots(prompt, (), params.n_ctx, params.n_vocab)[None, :]
    out, lengths = kernels.sample_batch(params.weights, init, u, float(temperature),
                                        params.n_ctx, params.n_pos, end_id)
    return tuple(int(t) for t in out[0, : lengths[0]])


def sample_many(params, prompts, uniforms, temperature: float, end: int, greedy: bool = False):
    """Sample one response per row of ``uniforms``; ``prompts[r]`` conditions row ``r``."""
    init = np.stack([context_slots(p, (), params.n_ctx, params.n_vocab) for p in prompts]) \
        if params.n_ctx else np.zeros((len(prompts), 0), dtype=np.int64)
    out, lengths = kernels.sample_batch(params.weights, init, np.ascontiguousarray(uniforms),
                                        float(temperature), params.n_ctx, params.n_pos, end,
                                        greedy)
    return [tuple(int(t) for t in out[r, : lengths[r]]) for r in range(len(prompts))]


def greedy_responses(params, prompts, max_len: int, end: int):
    dummy = np.zeros((len(prompts), max_len))
    return sample_many(params, prompts, dummy, 1.0, end, greedy=True)


def save_params(params, path) -> None:
    """Write a small ASCII header line followed by raw little-endian float64 weights."""
    header = (
        f"{_MAGIC.decode()} V={params.n_vocab} F={params.n_features} "
        f"n_ctx={params.n_ctx} n_pos={params.n_pos} seed={getattr(params, 'seed', 0)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())


def load_params(path) -> PolicyParams:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = data[:nl].decode("ascii").split()
    if " ".join(header[:2]).encode() != _MAGIC:
        raise ValueError(f"{path}: not a policy dump")
    fields = dict(item.split("=", 1) for item in header[2:])
    n_vocab, n_feat = int(fields["V"]), int(fields["F"])
    body = data[nl + 1:]
    if len(body) != 8 * n_vocab * n_feat:
        raise ValueError(f"{path}: expected {n_vocab}x{n_feat} weights, got {len(body)} bytes")
    w = np.frombuffer(body, dtype="<f8").reshape(n_vocab, n_feat).astype(np.float64)
    return PolicyParams(w, int(fields["n_ctx"]), int(fields["n_pos"]), int(fields["seed"]))
