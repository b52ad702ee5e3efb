"""Time the compiled gradient kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 100] [--d 100] [--batch 10] [--repeat 200]

Also times one full DP-SGD run (100 steps, full batch) in a subprocess for each
backend, selected through DPWARM_PURE_PYTHON.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dpwarm import kernels
from dpwarm._ext import _fallback
from dpwarm.core import RngStream, sample_unit_ball


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=repeat, repeat=5)) / repeat


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the fallback can be timed")
    rng = RngStream(0)
    X = sample_unit_ball(args.d, args.n, rng).samples
    y = rng.substream(1).generator().random(args.n)
    w = sample_unit_ball(args.d, 1, rng.substream(2)).samples[0]
    idx = rng.substream(3).generator().integers(0, args.n, size=args.batch)

    cases = [
        ("sine_bowl_mean_grad full", lambda m: m.sine_bowl_mean_grad(w, X)),
        (f"sine_bowl_mean_grad b={args.batch}", lambda m: m.sine_bowl_mean_grad(w, X, idx)),
        ("sine_bowl_mean_value full", lambda m: m.sine_bowl_mean_value(w, X)),
        ("quadratic_mean_grad full", lambda m: m.quadratic_mean_grad(w, X)),
        ("glm_mean_grad full", lambda m: m.glm_mean_grad(w, X, y)),
        (f"glm_mean_grad b={args.batch}", lambda m: m.glm_mean_grad(w, X, y, idx)),
    ]
    print(f"n={args.n} d={args.d}; times in microseconds per call")
    print(f"{'kernel':<32}{'python':>12}{'compiled':>12}{'speedup':>10}")
    for name, call in cases:
        t_py = _time(lambda: call(_fallback), args.repeat) * 1e6
        if kernels.BACKEND == "cython":
            t_c = _time(lambda: call(kernels), args.repeat) * 1e6
            print(f"{name:<32}{t_py:>12.2f}{t_c:>12.2f}{t_py / t_c:>9.1f}x")
        else:
            print(f"{name:<32}{t_py:>12.2f}{'-':>12}{'-':>10}")

    # end to end, backend chosen at import through the environment
    for label, env in (("python", {"DPWARM_PURE_PYTHON": "1"}), ("default", {})):
        out = subprocess.run([sys.executable, "-c", E2E.format(n=args.n, d=args.d)], capture_output=True,
                             text=True, env={**os.environ, **env}, check=True)
        print(f"dp_sgd 100 steps, {label:<8} {out.stdout.strip()}")


E2E = """
import timeit, numpy as np
from dpwarm import kernels
from dpwarm.core import RngStream, sample_unit_ball
from dpwarm.losses import sine_bowl
from dpwarm.optimizers import SgdConfig, dp_sgd
data = sample_unit_ball({d}, {n}, RngStream(0))
cfg = SgdConfig(100, {n}, 0.001, 1.0, np.zeros({d}), project_radius=2.0)
loss = sine_bowl()
t = min(timeit.repeat(lambda: dp_sgd(loss, data, cfg, RngStream(1)), number=5, repeat=5)) / 5
print(f"backend={{kernels.BACKEND}} {{t * 1e3:.2f}} ms")
"""


if __name__ == "__main__":
    main()
