"""Toy end-to-end run under the desk preset for each step-embedding layout.

    python3 benchmarks/ablate_step_embedding.py [--days 20] [--seeds 0 1]

Prints PICP at 90%, AW and mean-curve MSE on evenly spaced test days for
``model.step_frequencies`` = literal and inverse. Takes about ten minutes per
(layout, seed) pair on one core.
"""

import argparse
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml

from loadiff.cli import SAMPLE_STREAM, TRAIN_STREAM, load_dataset
from loadiff.config import load_config
from loadiff.data import Dataset
from loadiff.denoiser import init_model
from loadiff.diffusion import build_schedule, sample, train
from loadiff.metrics import evaluate
from loadiff.tensor import Context


def run(layout, seed, n_days, samples):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "toy.yaml"
        path.write_text(yaml.safe_dump({
            "data": {"synthetic_days": 730, "synthetic_seed": 0},
            "model": {"step_frequencies": layout},
            "seed": seed,
        }))
        cfg = load_config(path, preset="desk")
    if samples:
        cfg.eval.samples = samples
    ds = load_dataset(cfg)
    c, x = Dataset.stack(ds.train)
    model = init_model(cfg.model_config(c.shape[1]), cfg.seed)
    t0 = time.perf_counter()
    res = train(model, x, c, cfg.train_config(), Context(cfg.seed).spawn(TRAIN_STREAM))
    t_train = time.perf_counter() - t0
    idx = np.linspace(0, len(ds.test) - 1, n_days).round().astype(int)
    days = [ds.test[i] for i in idx]
    ct, xt = Dataset.stack(days)
    ens = sample(model, ct, build_schedule(cfg.train.T, cfg.train.beta1, cfg.train.betaT),
                 Context(cfg.seed).spawn(SAMPLE_STREAM), S=cfg.eval.samples,
                 day_keys=[d.date.toordinal() for d in days], x0_range=tuple(cfg.eval.x0_range))
    summary, _, _ = evaluate(ens, xt, pincs=(0.9,), with_kl=False)
    lvl = summary["levels"][0]
    print(f"{layout:8s} seed {seed}: loss {res.loss_history[-1]:.4f} ({t_train:.0f}s), "
          f"PICP@90 {lvl['picp']:.3f}, AW {lvl['aw']:.3f}, MSE {summary['mse']:.5f}", flush=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--days", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--samples", type=int, default=0, help="override eval.samples (0 keeps the preset)")
    ap.add_argument("--layouts", nargs="+", default=["literal", "inverse"])
    args = ap.parse_args(argv)
    for seed in args.seeds:
        for layout in args.layouts:
            run(layout, seed, args.days, args.samples)


if __name__ == "__main__":
    main()
