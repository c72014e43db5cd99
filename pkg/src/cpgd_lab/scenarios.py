"""Named experiment presets and the oracle verification suite."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import ExperimentConfig, parse_config
from .losses import ALGORITHMS
from .trainer import summary_dict, train, write_metrics_csv

# Learning-sanity preset: cpgd with default loss settings on arithmetic-sum.
DEFAULT_PRESET = {
    "task.kind": "arithmetic-sum",
    "task.max_operand": 1,
    "train.learning_rate": 0.02,
    "train.steps_per_episode": 300,
}

# Unstable regime: an elevated plain-gradient step, eight minibatch updates per
# rollout batch, and a two-token context window that hides the first operand
# from the answer position, so most sampled answers are wrong (advantages are
# mostly negative) and prompts keep pulling shared weights in opposite ways.
ADVERSARIAL_PRESET = {
    "task.kind": "arithmetic-sum",
    "task.max_operand": 4,
    "task.f_bonus": 0.2,
    "policy.n_ctx": 2,
    "train.optimizer": "sgd",
    "train.learning_rate": 20.0,
    "train.batch_size": 16,
    "train.minibatches": 8,
    "train.steps_per_episode": 150,
    "train.eval_every": 0,
}

COLLAPSE_VARIANTS = (
    ("rloo", {"loss.algorithm": "rloo"}),
    ("reinforce++", {"loss.algorithm": "reinforce++"}),
    ("grpo", {"loss.algorithm": "grpo"}),
    ("grpo-noclip", {"loss.algorithm": "grpo", "loss.epsilon": "inf"}),
    ("dual-clip", {"loss.algorithm": "dual-clip"}),
    ("grpo-drift", {"loss.algorithm": "grpo-drift"}),
    ("pg", {"loss.algorithm": "pg"}),
    ("cpg", {"loss.algorithm": "cpg"}),
    ("pgd", {"loss.algorithm": "pgd"}),
    ("cpgd", {"loss.algorithm": "cpgd"}),
)


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    preset: dict = field(default_factory=dict)
    variants: tuple = (("run", {}),)
    seeds: tuple = (0, 1, 2)


SCENARIOS = {
    s.name: s for s in (
        Scenario("train", "single run of the resolved configuration", DEFAULT_PRESET),
        Scenario("collapse-study", "ten algorithm variants under the adversarial preset",
                 ADVERSARIAL_PRESET, COLLAPSE_VARIANTS, (0, 1, 2, 3, 4)),
        Scenario("component-ablation", "pg / pgd / cpg / cpgd on the default preset", DEFAULT_PRESET,
                 tuple((a, {"loss.algorithm": a}) for a in ("pg", "pgd", "cpg", "cpgd"))),
        Scenario("weighting-ablation", "cpgd advantage weighting modes", DEFAULT_PRESET,
                 tuple((w, {"loss.algorithm": "cpgd", "loss.weighting": w})
                       for w in ("unprocessed", "equal", "std", "clip-filter"))),
        Scenario("reference-ablation", "cpgd with and without the reference constraint", DEFAULT_PRESET,
                 (("beta-off", {"loss.algorithm": "cpgd", "loss.beta": 0.0}),
                  ("beta-on", {"loss.algorithm": "cpgd", "loss.beta": 0.05}))),
        Scenario("verify", "oracle suite: gradient checks, one-step ratio ordering, "
                 "monotone improvement, KL estimators", seeds=(0,)),
    )
}


class UnknownScenario(KeyError):
    def __str__(self):
        return f"unknown scenario {self.args[0]!r}; available: {', '.join(SCENARIOS)}"


def get_scenario(name: str) -> Scenario:
    if name not in SCENARIOS:
        raise UnknownScenario(name)
    return SCENARIOS[name]


def resolve_variant(scenario: Scenario, overrides: dict, path=None, cli_overrides=(), seeds=None):
    preset = {"run.seeds": list(scenario.seeds), **scenario.preset, **overrides}
    cfg = parse_config(path, cli_overrides, preset=preset, seeds=seeds)
    cfg.scenario = scenario.name
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_training_scenario(scenario: Scenario, out: Path, path=None, cli_overrides=(), seeds=None,
                          log=print) -> dict:
    """Run every (variant, seed); write per-run CSV/JSON and a comparison JSON."""
    configs = [(name, resolve_variant(scenario, ov, path, cli_overrides, seeds))
               for name, ov in scenario.variants]
    seed_list = configs[0][1].seeds
    out.mkdir(parents=True, exist_ok=True)
    comparison = {"scenario": scenario.name, "seeds": seed_list, "variants": {}}
    for name, cfg in configs:
        per_seed = {}
        for seed in seed_list:
            t0 = time.perf_counter()
            tc = cfg.train_config(seed)
            run = train(tc)
            where = out if len(seed_list) == 1 else out / f"seed-{seed}"
            where.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(run.history, where / f"{name}.csv")
            resolved = cfg.as_dict()
            resolved["values"]["run"]["seed"] = str(seed)
            summary = summary_dict(run, resolved)
            summary["config_ini"] = cfg.to_ini()
            _write_json(where / f"{name}.summary.json", summary)
            per_seed[str(seed)] = {
                "collapse_flags": summary["collapse_flags"],
                "final_eval_accuracy": run.final_eval_accuracy,
                "final_train_accuracy": run.history[-1].accuracy if run.history else None,
                "peak_max_ratio": max((r.max_ratio for r in run.history), default=1.0),
            }
            if log:
                f = run.flags
                log(f"{scenario.name} {name} seed={seed}: eval_acc={run.final_eval_accuracy:.3f} "
                    f"ratio_explosion={f.ratio_explosion} length_collapse={f.length_collapse} "
                    f"accuracy_crash={f.accuracy_crash} ({time.perf_counter() - t0:.1f}s)")
        counts = {flag: sum(v["collapse_flags"][flag] for v in per_seed.values())
                  for flag in ("ratio_explosion", "length_collapse", "accuracy_crash")}
        comparison["variants"][name] = {
            "algorithm": cfg.get("loss.algorithm"),
            "per_seed": per_seed,
            "flag_counts": counts,
            "mean_final_eval_accuracy": float(np.mean([v["final_eval_accuracy"] for v in per_seed.values()])),
        }
    _write_json(out / "comparison.json", comparison)
    return comparison


# --- verification suite ------------------------------------------------------

def run_verify(out: Path | None = None, log=print) -> dict:
    """Run every oracle check; ``report["passed"]`` is False if any check fails."""
    from . import oracle
    from .divergence import drift_coefficient
    from .policy import PolicyParams
    from .tasks import Task

    checks = {}
    t0 = time.perf_counter()
    grads = {a: oracle.gradient_check(a, 20, seed=0) for a in ALGORITHMS}
    checks["gradients"] = {
        "passed": all(g["max_rel_error"] < 1e-5 for g in grads.values()),
        "max_rel_error": {a: g["max_rel_error"] for a, g in grads.items()},
    }

    ordering = oracle.verify_ratio_ordering()
    checks["ratio_ordering"] = {"passed": ordering["all_cases_hold"], **ordering}

    task = Task(kind="parity", min_items=1, max_items=2, max_response_len=3, f_bonus=0.0)
    surr, seq, accepted = oracle.exact_update_run(task, steps=60, alpha=0.1)
    mono = oracle.verify_monotone_improvement(surr, seq, 0.1, accepted)
    checks["monotone_improvement"] = {
        "passed": mono["holds"] and mono["n_accepted"] >= 50,
        **{k: mono[k] for k in ("alpha", "n_steps", "n_accepted", "violations", "skipped", "monotone")},
        "eta_first": mono["eta"][0], "eta_last": mono["eta"][-1],
    }

    rows = []
    for i in range(10):
        rng = np.random.default_rng([7, i])
        old = PolicyParams.random(4, 2, 3, 0.5, seed=int(rng.integers(2**31)))
        new = PolicyParams(old.weights + rng.normal(0, 0.2, old.weights.shape), 2, 3)
        rep = oracle.mc_estimator_error(old, new, (0, 1), sample_counts=(10, 100, 1000),
                                        repeats=40, max_len=3, end=3, seed=i)
        rows.append({k: rep[k] for k in ("exact_kl", "mean_k1", "mean_k3", "var_k1", "var_k3",
                                         "min_k3", "k1_converges", "k3_converges", "var_ordering")})
    checks["kl_estimators"] = {
        "passed": all(abs(r["mean_k1"] - r["exact_kl"]) < 1e-10 and abs(r["mean_k3"] - r["exact_kl"]) < 1e-10
                      and r["min_k3"] >= 0 and r["var_ordering"] for r in rows),
        "pairs": rows,
    }

    grid = np.geomspace(0.1, 100.0, 400)
    coef = drift_coefficient(np.log(grid), 2.0)
    checks["drift_cap"] = {
        "passed": bool(np.all(coef[grid - 1 > 2.0] == 2.0) and np.all(coef[grid - 1 > 2.0] >= 0)
                       and np.allclose(coef[grid - 1 <= 2.0], grid[grid - 1 <= 2.0] - 1)),
    }

    report = {
        "backend": kernels.BACKEND,
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
        "seconds": round(time.perf_counter() - t0, 2),
    }
    if log:
        for name, c in checks.items():
            log(f"verify {name}: {'PASS' if c['passed'] else 'FAIL'}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "verify.json", _finite(report))
    return report


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def run_scenario(name: str, out, path=None, cli_overrides=(), seeds=None, log=print) -> int:
    """Execute a scenario; returns the process exit status."""
    scenario = get_scenario(name)
    out = Path(out)
    if name == "verify":
        return 0 if run_verify(out, log)["passed"] else 1
    run_training_scenario(scenario, out, path, cli_overrides, seeds, log)
    return 0


__all__ = ["SCENARIOS", "Scenario", "ExperimentConfig", "get_scenario", "run_scenario", "run_verify",
           "run_training_scenario", "resolve_variant"]
