"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeats 7] [--model]

Kernel timings call both flavours directly in one process. ``--model`` also
times one denoiser forward pass at sampling scale in two subprocesses, one per
``LOADIFF_NUMBA`` setting, since the dispatch is fixed at import.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from loadiff import kernels
from loadiff._accel import HAS_NUMBA

MODEL_SNIPPET = """
import time, numpy as np
from loadiff.denoiser import ModelConfig, init_model
from loadiff.tensor import Context
m = init_model(ModelConfig(n_steps=200), 0).eval()
ctx = Context(1)
x, c = ctx.normal(({rows}, 24, 1)), ctx.uniform(({rows}, 24, 1))
m.predict_noise(x[:2], c[:2], 5)
best = float("inf")
for _ in range({repeats}):
    t0 = time.perf_counter(); m.predict_noise(x, c, 5); best = min(best, time.perf_counter() - t0)
print(best)
"""


def timeit(fn, repeats):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng):
    n, b, h = 24, 512, 128
    xw = rng.standard_normal((n, b, 4 * h)) * 0.5
    w_h = rng.standard_normal((h, 4 * h)) / np.sqrt(h)
    hs, cs, gates = kernels.lstm_forward_numpy(xw, w_h)
    dhs = rng.standard_normal(hs.shape)
    grid = np.linspace(-4, 4, 512)
    samples = rng.standard_normal(2000)
    return [
        (f"lstm forward  N={n} B={b} H={h}",
         lambda: kernels.lstm_forward_numpy(xw, w_h), lambda: kernels.lstm_forward_numba(xw, w_h)),
        (f"lstm backward N={n} B={b} H={h}",
         lambda: kernels.lstm_backward_numpy(dhs, hs, cs, gates, w_h),
         lambda: kernels.lstm_backward_numba(dhs, hs, cs, gates, w_h)),
        ("kde 512 grid x 2000 samples",
         lambda: kernels.gaussian_kde_eval_numpy(grid, samples, 0.2),
         lambda: kernels.gaussian_kde_eval_numba(grid, samples, 0.2)),
    ]


def model_forward(flag, rows, repeats):
    env = dict(os.environ, LOADIFF_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", MODEL_SNIPPET.format(rows=rows, repeats=repeats)],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--model", action="store_true", help="also time a full denoiser forward pass")
    ap.add_argument("--rows", type=int, default=2000, help="batch rows for --model")
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'case':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb in kernel_cases(rng):
        t_np, t_nb = timeit(f_np, args.repeats), timeit(f_nb, args.repeats)
        print(f"{name:34s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.2f}x")
    if args.model:
        reps = max(2, args.repeats // 2)
        t_np, t_nb = model_forward("0", args.rows, reps), model_forward("1", args.rows, reps)
        name = f"denoiser forward, {args.rows} rows"
        print(f"{name:34s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
