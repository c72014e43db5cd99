"""Time the compiled kernels against the numpy fallback, plus one full training step.

A training step is dominated by Python-level rollout bookkeeping, so its
speedup is much smaller than the per-kernel numbers.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cpgd_lab.kernels import available_backends

V, N_CTX, N_POS = 12, 4, 8
F = N_CTX * (V + 1) + N_POS


def workload(seed=0, n_tokens=4096, n_resp=256, max_len=8):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.5, (V, F))
    slots = rng.integers(0, V + 1, size=(n_tokens, N_CTX)) + np.arange(N_CTX) * (V + 1)
    pos = N_CTX * (V + 1) + rng.integers(0, N_POS, size=(n_tokens, 1))
    feats = np.ascontiguousarray(np.hstack([slots, pos]).astype(np.int64))
    tokens = rng.integers(0, V, size=n_tokens).astype(np.int64)
    coef = rng.normal(size=n_tokens)
    init = rng.integers(0, V + 1, size=(n_resp, N_CTX)).astype(np.int64)
    uniforms = rng.random((n_resp, max_len))
    return w, feats, tokens, coef, init, uniforms


def bench_kernels(mod, repeats):
    w, feats, tokens, coef, init, uniforms = workload()
    _, probs = mod.token_logprobs(w, feats, tokens)
    cases = {
        "token_logprobs (4096 tokens)": lambda: mod.token_logprobs(w, feats, tokens),
        "scatter_grad (4096 tokens)": lambda: mod.scatter_grad(coef, feats, tokens, probs, F),
        "sample_batch (256 x 8)": lambda: mod.sample_batch(w, init, uniforms, 1.0, N_CTX, N_POS, V - 1),
    }
    return {name: min(timeit.repeat(fn, number=20, repeat=repeats)) / 20 for name, fn in cases.items()}


def bench_train_step(repeats):
    # re-imported in a subprocess per backend because selection happens at import
    code = (
        "import timeit\n"
        "from cpgd_lab.trainer import TrainConfig, init_state, run_step\n"
        "from cpgd_lab.tasks import Task\n"
        "cfg = TrainConfig(task=Task(max_operand=4), batch_size=16, k=8)\n"
        "s = init_state(cfg)\n"
        f"print(min(timeit.repeat(lambda: run_step(s, cfg), number=5, repeat={repeats})) / 5)\n"
    )
    # alternate backends across rounds so machine-load drift hits both equally
    out = {}
    for _ in range(3):
        for backend in available_backends():
            env = dict(os.environ, CPGD_LAB_BACKEND=backend)
            res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                 check=True)
            out[backend] = min(out.get(backend, float("inf")), float(res.stdout.strip()))
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    results = {name: bench_kernels(mod, args.repeats) for name, mod in backends.items()}
    step = bench_train_step(args.repeats)

    names = list(results)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    rows = list(results[names[0]])
    for row in rows:
        line = f"{row:32s}" + "".join(f"{results[n][row] * 1e3:10.3f}ms" for n in names)
        if len(names) > 1:
            line += f"{results['python'][row] / results['cython'][row]:11.1f}x"
        print(line)
    line = f"{'run_step (16 prompts x 8)':32s}" + "".join(f"{step[n] * 1e3:10.3f}ms" for n in names)
    if len(names) > 1:
        line += f"{step['python'] / step['cython']:11.1f}x"
    print(line)


if __name__ == "__main__":
    main()
