"""Compiled versus pure-numpy conv kernels, plus one full training step per backend.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Kernel timings call both implementations directly. The training-step timing
runs in a subprocess per backend because the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cmc import _kernels_py
from cmc.controller import tune_allocator

try:
    from cmc import _kernels as _compiled
except ImportError:
    _compiled = None

# (batch, padded height, padded width, in channels, out channels) seen in the desk encoder/decoder
SHAPES = [(32, 18, 18, 3, 4), (32, 10, 10, 4, 8), (32, 6, 6, 8, 8), (32, 18, 18, 8, 3)]

STEP_SNIPPET = """
import time, numpy as np
from cmc import kernels
from cmc.controller import tune_allocator
from cmc.learner import ActorCritic, LearnerConfig, Minibatch
tune_allocator()
ac = ActorCritic((32, 32, 3), 3, LearnerConfig(), seed=0)
rng = np.random.default_rng(0)
n = 32
obs, nxt = rng.random((n, 32, 32, 3)), rng.random((n, 32, 32, 3))
b = Minibatch(obs=obs, phi=ac.encode(obs), action=rng.uniform(-1, 1, (n, 3)), reward=rng.random(n),
              reward_ext=rng.random(n), next_obs=nxt, next_phi=ac.encode(nxt), done=np.zeros(n))
ac.combined_update(b)
t = time.perf_counter()
for _ in range({repeats}):
    ac.combined_update(b)
print(kernels.BACKEND, (time.perf_counter() - t) / {repeats})
"""


def best_of(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def bench_kernels(repeats):
    rows = []
    rng = np.random.default_rng(0)
    for n, hp, wp, c, f in SHAPES:
        xp = rng.standard_normal((n, hp, wp, c))
        w = rng.standard_normal((3, 3, c, f))
        b = rng.standard_normal(f)
        gy = rng.standard_normal((n, hp - 2, wp - 2, f))
        row = {"shape": [n, hp, wp, c, f]}
        impls = {"python": _kernels_py}
        if _compiled is not None:
            impls["compiled"] = _compiled
        for name, mod in impls.items():
            row[f"{name}_forward_ms"] = 1e3 * best_of(lambda: mod.conv2d_forward(xp, w, b), repeats)
            row[f"{name}_backward_ms"] = 1e3 * best_of(lambda: mod.conv2d_backward(xp, w, gy), repeats)
        if _compiled is not None:
            ref, out = _kernels_py.conv2d_backward(xp, w, gy), _compiled.conv2d_backward(xp, w, gy)
            row["max_abs_diff"] = float(max(np.max(np.abs(a - b)) for a, b in zip(ref, out)))
        rows.append(row)
    return rows


def bench_step(repeats):
    out = {}
    for pure in (False, True):
        env = dict(os.environ, CMC_PURE_PYTHON="1" if pure else "0")
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeats=repeats)], env=env,
                             capture_output=True, text=True, check=True)
        backend, seconds = res.stdout.split()
        out[backend] = 1e3 * float(seconds)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--json", help="also write the results here")
    args = p.parse_args(argv)
    tune_allocator()

    kernels = bench_kernels(args.repeats)
    print(f"{'shape (N,Hp,Wp,C,F)':<24}{'impl':<10}{'fwd ms':>9}{'bwd ms':>9}")
    for row in kernels:
        for impl in ("python", "compiled"):
            if f"{impl}_forward_ms" in row:
                print(f"{str(tuple(row['shape'])):<24}{impl:<10}{row[impl + '_forward_ms']:>9.3f}"
                      f"{row[impl + '_backward_ms']:>9.3f}")
    step = bench_step(max(3, args.repeats // 2))
    print("combined update, minibatch 32 (ms):", ", ".join(f"{k} {v:.2f}" for k, v in step.items()))
    if "compiled" in step and "python" in step:
        print(f"speedup {step['python'] / step['compiled']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "combined_update_ms": step}, fh, indent=2)


if __name__ == "__main__":
    main()
