"""Rollout, loss, update loop with metric logging and collapse detectors."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .losses import PG_FAMILY, LossConfig, NonFiniteLossError, RolloutGroup, assign_advantages, \
    compute_loss, is_correction_weight
from .policy import PolicyParams, PolicySnapshot, sample_many, snapshot
from .tasks import Task, generate_prompts, reward, response_length

METRIC_COLUMNS = ("step", "accuracy", "clip_fraction", "mean_ratio", "max_ratio", "mean_length",
                  "loss", "drift_value", "grad_norm")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_LR = {"sgd": 0.05, "adam": 0.005}
# stream tags for the seeded generators
_PROMPT_STREAM = 1
_EVAL_STREAM = 2


@dataclass(frozen=True)
class CollapseThresholds:
    r_max: float = 10.0
    l_min: float = 2.0
    window: int = 20
    delta: float = 0.3
    format_rate: float = 0.9


@dataclass(frozen=True)
class TrainConfig:
    task: Task = field(default_factory=Task)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    k: int = 8
    episodes: int = 1
    steps_per_episode: int = 300
    minibatches: int = 1
    optimizer: str = "adam"
    learning_rate: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    n_ctx: int = 4
    n_pos: int = 4
    init_scale: float = 0.0
    seed: int = 0
    eval_every: int = 50
    eval_prompts: int = 64
    collapse: CollapseThresholds = field(default_factory=CollapseThresholds)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2 for group-based advantages")
        if self.episodes < 0 or self.steps_per_episode < 0:
            raise ValueError("episodes and steps_per_episode must be non-negative")
        if not 1 <= self.minibatches <= self.batch_size:
            raise ValueError("minibatches must lie in [1, batch_size]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.eval_every < 0 or self.eval_prompts < 1:
            raise ValueError("eval_every must be >= 0 and eval_prompts >= 1")

    @property
    def lr(self) -> float:
        """Learning rate, falling back to the optimizer's default when unset."""
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LR[self.optimizer]

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    accuracy: float
    clip_fraction: float
    mean_ratio: float
    max_ratio: float
    mean_length: float
    loss: float
    drift_value: float
    grad_norm: float
    format_rate: float = 0.0
    eval_accuracy: float | None = None

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class CollapseFlags:
    ratio_explosion: bool = False
    length_collapse: bool = False
    accuracy_crash: bool = False
    ratio_explosion_step: int | None = None
    length_collapse_step: int | None = None
    accuracy_crash_step: int | None = None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.t, None if self.m is None else self.m.copy(),
                              None if self.v is None else self.v.copy())


@dataclass
class TrainState:
    params: PolicyParams
    old: PolicySnapshot
    reference: PolicySnapshot
    opt: OptimizerState
    step: int = 0
    history: list = field(default_factory=list)

    def copy(self) -> "TrainState":
        return TrainState(self.params.copy(), self.old, self.reference, self.opt.copy(), self.step,
                          list(self.history))


class TrainingError(RuntimeError):
    """A step failed; carries the step index and the ratio statistics at failure."""


def init_state(config: TrainConfig) -> TrainState:
    v = config.task.vocab.size
    if config.init_scale > 0:
        params = PolicyParams.random(v, config.n_ctx, config.n_pos, config.init_scale,
                                     seed=config.seed)
    else:
        params = PolicyParams.zeros(v, config.n_ctx, config.n_pos, seed=config.seed)
    return TrainState(params, snapshot(params, "old"), snapshot(params, "reference"), OptimizerState())


def optimizer_step(params: PolicyParams, gradient, state: OptimizerState, config: TrainConfig) -> PolicyParams:
    """Return updated params; mutates ``state`` for the adaptive-moment method."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.weights.shape:
        raise ValueError(f"gradient shape {g.shape} does not match weights {params.weights.shape}")
    lr = config.lr
    if config.optimizer == "sgd":
        new_w = params.weights - lr * g
    else:
        if state.m is None:
            state.m = np.zeros_like(g)
            state.v = np.zeros_like(g)
        state.t += 1
        b1, b2 = config.adam_beta1, config.adam_beta2
        state.m = b1 * state.m + (1 - b1) * g
        state.v = b2 * state.v + (1 - b2) * g * g
        m_hat = state.m / (1 - b1 ** state.t)
        v_hat = state.v / (1 - b2 ** state.t)
        new_w = params.weights - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return dataclasses.replace(params, weights=new_w)


def _uniforms(config: TrainConfig, step: int, n_prompts: int) -> np.ndarray:
    max_len = config.task.max_response_len
    rows = [np.random.default_rng([config.seed, step, p, k]).random(max_len)
            for p in range(n_prompts) for k in range(config.k)]
    return np.stack(rows)


def collect_rollouts(state: TrainState, config: TrainConfig):
    """Sample K responses per prompt under the frozen old snapshot and score them."""
    task = config.task
    prompts = generate_prompts(task, config.batch_size,
                               np.random.default_rng([config.seed, state.step, _PROMPT_STREAM]))
    uniforms = _uniforms(config, state.step, len(prompts))
    rows = [p for p in prompts for _ in range(config.k)]
    responses = sample_many(state.old, rows, uniforms, config.temperature, task.vocab.end)
    groups = []
    for i, prompt in enumerate(prompts):
        resp = responses[i * config.k:(i + 1) * config.k]
        rewards = [reward(task, prompt, y) for y in resp]
        ref = state.reference if config.loss.beta > 0 else None
        groups.append(RolloutGroup.build(prompt, resp, rewards, state.old, ref))
    return groups


def _minibatches(groups, n):
    size = math.ceil(len(groups) / n)
    return [groups[i:i + size] for i in range(0, len(groups), size)]


def run_step(state: TrainState, config: TrainConfig):
    """One rollout batch, ``ppo_epochs`` passes of minibatch updates, then refresh the old snapshot."""
    task = config.task
    groups = collect_rollouts(state, config)
    assign_advantages(groups, config.loss)
    params = state.params
    opt = state.opt.copy()
    losses, clips, drifts, grad_sq, max_ratio = [], [], [], 0.0, 1.0
    pg_family = config.loss.algorithm in PG_FAMILY
    for epoch in range(1, config.loss.ppo_epochs + 1):
        for g in groups:
            if epoch >= 2 and pg_family:
                prev, _ = kernels.token_logprobs(params.weights, g.feats, g.tokens)
                g.is_weights = is_correction_weight(prev, g.old_logp, config.loss.epsilon, epoch)
            else:
                g.is_weights = None
        for mb in _minibatches(groups, config.minibatches):
            try:
                rep = compute_loss(mb, params, config.loss)
            except NonFiniteLossError as exc:
                raise TrainingError(
                    f"step {state.step} epoch {epoch}: non-finite gradient (ratio_explosion "
                    f"context, max ratio so far {max_ratio:.3g}): {exc}") from exc
            losses.append(rep.loss)
            clips.append(rep.clip_fraction)
            drifts.append(rep.drift_value)
            max_ratio = max(max_ratio, rep.max_ratio)
            grad_sq += float(np.sum(rep.gradient ** 2))
            params = optimizer_step(params, rep.gradient, opt, config)
    if not np.all(np.isfinite(params.weights)):
        raise TrainingError(f"step {state.step}: parameters became non-finite (ratio_explosion context)")

    # post-update ratios against the sampling snapshot
    feats = np.vstack([g.feats for g in groups])
    tokens = np.concatenate([g.tokens for g in groups])
    old_lp = np.concatenate([g.old_logp for g in groups])
    new_lp, _ = kernels.token_logprobs(params.weights, feats, tokens)
    with np.errstate(over="ignore"):
        ratio = np.exp(new_lp - old_lp)
    max_ratio = max(max_ratio, float(np.max(ratio)))

    outcomes = [r.outcome for g in groups for r in g.rewards]
    formats = [r.format > 0 for g in groups for r in g.rewards]
    lengths = [response_length(task, y) for g in groups for y in g.responses]
    record = MetricsRecord(
        step=state.step,
        accuracy=float(np.mean(outcomes)),
        clip_fraction=float(np.mean(clips)),
        mean_ratio=float(np.mean(ratio)),
        max_ratio=max_ratio,
        mean_length=float(np.mean(lengths)),
        loss=float(np.mean(losses)),
        drift_value=float(np.mean(drifts)),
        grad_norm=math.sqrt(grad_sq / len(losses)),
        format_rate=float(np.mean(formats)),
    )
    new_state = TrainState(params, snapshot(params, "old"), state.reference, opt, state.step + 1,
                           state.history + [record])
    return new_state, record


def detect_collapse(history, thresholds: CollapseThresholds = CollapseThresholds()) -> CollapseFlags:
    """Scan a metrics history; each flag is raised at the first step its condition completes."""
    if not history:
        raise ValueError("history must be non-empty")
    flags = CollapseFlags()
    w = thresholds.window
    ratio_run = length_run = 0
    peak = -math.inf
    for rec in history:
        ratio_run = ratio_run + 1 if rec.max_ratio > thresholds.r_max else 0
        hacked = rec.mean_length < thresholds.l_min and rec.format_rate > thresholds.format_rate
        length_run = length_run + 1 if hacked else 0
        peak = max(peak, rec.accuracy)
        if not flags.ratio_explosion and ratio_run >= w:
            flags.ratio_explosion, flags.ratio_explosion_step = True, rec.step
        if not flags.length_collapse and length_run >= w:
            flags.length_collapse, flags.length_collapse_step = True, rec.step
        if not flags.accuracy_crash and peak - rec.accuracy > thresholds.delta:
            flags.accuracy_crash, flags.accuracy_crash_step = True, rec.step
    return flags


def eval_prompts(config: TrainConfig):
    """Held-out prompts, drawn from a stream disjoint from the training prompt streams."""
    return generate_prompts(config.task, config.eval_prompts,
                            np.random.default_rng([config.seed, _EVAL_STREAM]))


def greedy_accuracy(params, config: TrainConfig, prompts=None) -> float:
    task = config.task
    prompts = eval_prompts(config) if prompts is None else prompts
    uniforms = np.zeros((len(prompts), task.max_response_len))
    responses = sample_many(params, prompts, uniforms, 1.0, task.vocab.end, greedy=True)
    return float(np.mean([reward(task, x, y).outcome for x, y in zip(prompts, responses)]))


@dataclass
class RunRecord:
    config: TrainConfig
    params: PolicyParams
    history: list
    flags: CollapseFlags
    final_eval_accuracy: float
    state: TrainState


def train(config: TrainConfig, state: TrainState | None = None, n_steps: int | None = None) -> RunRecord:
    """Run ``n_steps`` (default: all remaining) steps, resuming from ``state`` if given."""
    state = init_state(config) if state is None else state.copy()
    remaining = config.total_steps - state.step
    n = remaining if n_steps is None else min(n_steps, remaining)
    held_out = eval_prompts(config)
    for _ in range(n):
        step = state.step
        try:
            state, rec = run_step(state, config)
        except TrainingError as exc:
            raise TrainingError(f"{config.loss.algorithm} seed {config.seed}: {exc}") from exc
        if config.eval_every and (step + 1) % config.eval_every == 0:
            acc = greedy_accuracy(state.params, config, held_out)
            state.history[-1] = dataclasses.replace(rec, eval_accuracy=acc)
    flags = detect_collapse(state.history, config.collapse) if state.history else CollapseFlags()
    final = greedy_accuracy(state.params, config, held_out)
    return RunRecord(config, state.params, state.history, flags, final, state)


# --- persistence --------------------------------------------------------------

def _fmt(x) -> str:
    return repr(int(x)) if isinstance(x, (int, np.integer)) else repr(float(x))


def write_metrics_csv(history, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            w.writerow([_fmt(v) for v in rec.row()])


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def config_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def summary_dict(run: RunRecord, resolved: dict | None = None) -> dict:
    last = run.history[-1] if run.history else None
    return _json_safe({
        "config": resolved if resolved is not None else config_dict(run.config),
        "backend": kernels.BACKEND,
        "steps": len(run.history),
        "final_metrics": dataclasses.asdict(last) if last else None,
        "final_eval_accuracy": run.final_eval_accuracy,
        "collapse_flags": run.flags.as_dict(),
    })


def write_summary_json(run: RunRecord, path, resolved: dict | None = None) -> None:
    Path(path).write_text(json.dumps(summary_dict(run, resolved), indent=2, sort_keys=True) + "\n")
