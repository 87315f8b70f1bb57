"""Numba vs pure-numpy kernel backends.

Times each hot kernel at tiny-preset shapes, then a full training step per
backend (each in a fresh interpreter, since the backend is fixed at import).

    python3 benchmarks/bench_kernels.py --batch 128 --reps 10
"""
import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from chanprune.kernels import backend_module

STEP_SNIPPET = """
import json, statistics, time, numpy as np
from chanprune import kernels
from chanprune.engine import Hyperparams, init_velocity, train_step
from chanprune.graph import build_preset
g = build_preset("tiny", 10, 0)
rng = np.random.default_rng(0)
x = rng.normal(size=({batch}, 32, 32, 3)).astype(np.float32)
y = rng.integers(0, 10, {batch})
v = init_velocity(g)
hp = Hyperparams()
losses = [train_step(g, v, x, y, hp)[0] for _ in range(2)]
times = []
for _ in range({reps}):
    t0 = time.perf_counter()
    losses.append(train_step(g, v, x, y, hp)[0])
    times.append((time.perf_counter() - t0) * 1e3)
print(json.dumps({{"backend": kernels.BACKEND, "median_ms": statistics.median(times), "losses": losses}}))
"""


def timeit(fn, reps):
    fn()  # compile / warm caches
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def kernel_cases(batch, rng):
    x = rng.normal(size=(batch, 34, 34, 16)).astype(np.float32)
    cols_grad = rng.normal(size=(batch, 32, 32, 3, 3, 16)).astype(np.float32)
    act = rng.normal(size=(batch, 32, 32, 16)).astype(np.float32)
    flat = act.reshape(-1, 16)
    gamma, beta = np.ones(16, np.float32), np.zeros(16, np.float32)

    def cases(k):
        out, arg = k.maxpool_forward(act, 2, 2)
        dout = np.ones_like(out)
        bn = k.bn_train_forward(flat, gamma, beta, 1e-5)
        return {
            "im2col": lambda: k.im2col(x, 3, 3, 1, 32, 32),
            "col2im": lambda: k.col2im(cols_grad, 34, 34, 1),
            "maxpool_forward": lambda: k.maxpool_forward(act, 2, 2),
            "maxpool_backward": lambda: k.maxpool_backward(dout, arg, act.shape, 2, 2),
            "bn_train_forward": lambda: k.bn_train_forward(flat, gamma, beta, 1e-5),
            "bn_backward": lambda: k.bn_backward(flat, bn[1], gamma, bn[2]),
        }
    return cases


def train_step_ms(backend, batch, reps):
    env = dict(os.environ, CHANPRUNE_BACKEND=backend)
    code = STEP_SNIPPET.format(batch=batch, reps=reps)
    proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--json", default=None, help="also write results here")
    args = ap.parse_args(argv)

    cases = kernel_cases(args.batch, np.random.default_rng(0))
    results = {"batch": args.batch, "kernels": {}, "train_step": {}}
    per_backend = {name: cases(backend_module(name)) for name in ("numba", "numpy")}
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for kernel in per_backend["numba"]:
        a = timeit(per_backend["numba"][kernel], args.reps)
        b = timeit(per_backend["numpy"][kernel], args.reps)
        results["kernels"][kernel] = {"numba_ms": a, "numpy_ms": b}
        print(f"{kernel:<18}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")

    steps = {name: train_step_ms(name, args.batch, args.reps) for name in ("numba", "numpy")}
    same = steps["numba"]["losses"] == steps["numpy"]["losses"]
    for name, res in steps.items():
        results["train_step"][name] = res["median_ms"]
    a, b = steps["numba"]["median_ms"], steps["numpy"]["median_ms"]
    print(f"{'train_step':<18}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")
    print(f"identical training losses across backends: {same}")
    results["identical_losses"] = same
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
