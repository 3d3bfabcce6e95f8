"""``loadiff`` command line: train, generate, evaluate, report.

A typical run::

    loadiff train    --config run.yaml --out runs/a
    loadiff generate --checkpoint runs/a/checkpoint.ldf --out runs/a/gen
    loadiff evaluate --ensembles runs/a/gen --out runs/a/eval
    loadiff report   --run runs/a/eval --train runs/a --out runs/a/report

Every output directory receives a ``config.yaml`` snapshot including the seed.
Exit codes: 0 ok, 2 configuration, 3 data or checkpoint, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import HOURS, Dataset, prepare_dataset, read_load_csv, synthetic_records
from .denoiser import init_model, load_checkpoint, save_checkpoint
from .diffusion import build_schedule, sample, train
from .errors import CheckpointError, ConfigError, DataError, LoadiffError
from .metrics import evaluate, persistence_ensemble
from .tensor import Context

log = logging.getLogger("loadiff")

TRAIN_STREAM = 0x7A
SAMPLE_STREAM = 0x5A
HOUR_COLUMNS = [f"h{h:02d}" for h in range(HOURS)]


def fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        w.writerows(rows)


def _read_rows(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input file: {path}")
    with path.open(newline="") as fh:
        return list(csv.reader(fh))


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path is None:
        records = synthetic_records(d.synthetic_days, seed=d.synthetic_seed)
    else:
        records, _ = read_load_csv(d.path, d.columns())
    return prepare_dataset(records, d.split_ratio, d.last_days)


def _out_dir(cfg, args):
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train -----------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config, args.preset, args.seed, args.out, args.pinc)
    out = _out_dir(cfg, args)
    ds = load_dataset(cfg)
    if not ds.train:
        raise DataError("no training days after windowing")
    c, x = Dataset.stack(ds.train)
    model = init_model(cfg.model_config(c.shape[1]), cfg.seed)
    result = train(model, x, c, cfg.train_config(), Context(cfg.seed).spawn(TRAIN_STREAM))
    meta = {
        "seed": cfg.seed,
        "normalizer": {"min": ds.normalizer.min, "max": ds.normalizer.max},
        "train_days": [ds.train[0].date.isoformat(), ds.train[-1].date.isoformat()],
        "test_days": [ds.test[0].date.isoformat(), ds.test[-1].date.isoformat()] if ds.test else [],
    }
    save_checkpoint(model, out / "checkpoint.ldf", meta)
    _write_rows(out / "loss_history.csv", ["epoch", "loss"],
                [[i + 1, fmt(v)] for i, v in enumerate(result.loss_history)])
    cfg.dump(out / "config.yaml")
    print(f"trained {len(ds.train)} days, {cfg.train.epochs} epochs, final loss "
          f"{result.loss_history[-1]:.6f} ({result.seconds:.1f}s) -> {out}")
    return 0


# -- generate --------------------------------------------------------------------


def _config_near(args, directory, check_paths=True):
    """``--config`` if given, else the snapshot left in ``directory`` by an earlier step."""
    path = args.config
    if path is None:
        snapshot = Path(directory) / "config.yaml"
        path = snapshot if snapshot.is_file() else None
    return load_config(path, args.preset, args.seed, args.out, args.pinc, check_paths=check_paths)


def _select_days(samples, start, end):
    if not samples:
        raise DataError("the test split is empty")
    first, last = samples[0].date, samples[-1].date
    lo = date.fromisoformat(start) if start else first
    hi = date.fromisoformat(end) if end else last
    if lo > hi:
        raise DataError(f"--start {lo} is after --end {hi}")
    if lo < first or hi > last:
        raise DataError(f"requested dates {lo}..{hi} fall outside the test range {first}..{last}")
    chosen = [s for s in samples if lo <= s.date <= hi]
    if not chosen:
        raise DataError(f"no complete test days between {lo} and {hi}")
    return chosen


def cmd_generate(args):
    cfg = _config_near(args, Path(args.checkpoint).parent)
    out = _out_dir(cfg, args)
    model = load_checkpoint(args.checkpoint, expected_seq_len=HOURS)
    if model.config.n_steps != cfg.train.T:
        raise CheckpointError(
            f"{args.checkpoint}: trained with T={model.config.n_steps} but train.T={cfg.train.T}"
        )
    ds = load_dataset(cfg)
    days = _select_days(ds.test, args.start, args.end)
    cond, actual = Dataset.stack(days)
    schedule = build_schedule(cfg.train.T, cfg.train.beta1, cfg.train.betaT)
    x0_range = tuple(cfg.eval.x0_range) if cfg.eval.x0_range is not None else None
    ens = sample(model, cond, schedule, Context(cfg.seed).spawn(SAMPLE_STREAM), S=cfg.eval.samples,
                 day_keys=[d.date.toordinal() for d in days], x0_range=x0_range)
    norm = ds.normalizer
    (out / "ensembles").mkdir(exist_ok=True)
    (out / "ensembles_mw").mkdir(exist_ok=True)
    for day, members in zip(days, ens):
        name = f"{day.date.isoformat()}.csv"
        _write_rows(out / "ensembles" / name, None, [[fmt(v) for v in row] for row in members])
        _write_rows(out / "ensembles_mw" / name, None,
                    [[fmt(v) for v in row] for row in norm.denormalize(members)])
    header = ["date"] + HOUR_COLUMNS
    _write_rows(out / "actuals.csv", header, [[d.date.isoformat()] + [fmt(v) for v in d.target] for d in days])
    _write_rows(out / "conditions.csv", header,
                [[d.date.isoformat()] + [fmt(v) for v in d.condition] for d in days])
    (out / "normalizer.json").write_text(json.dumps({"min": norm.min, "max": norm.max}, sort_keys=True) + "\n")
    cfg.dump(out / "config.yaml")
    print(f"generated {len(days)} days x {cfg.eval.samples} curves -> {out}")
    return 0


# -- evaluate --------------------------------------------------------------------


def _read_day_table(path):
    rows = _read_rows(path)
    if not rows or rows[0][:1] != ["date"]:
        raise DataError(f"{path}: expected a header starting with 'date'")
    table = {}
    for row in rows[1:]:
        try:
            table[row[0]] = np.array([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: bad row for {row[:1]}: {exc}") from None
    return table


def load_generated(directory):
    """Ensembles ``[D, S, N]``, actuals and conditions ``[D, N]``, and dates."""
    directory = Path(directory)
    ens_dir = directory / "ensembles"
    files = sorted(ens_dir.glob("*.csv")) if ens_dir.is_dir() else []
    if not files:
        raise DataError(f"no ensemble files under {ens_dir}")
    actuals = _read_day_table(directory / "actuals.csv")
    conditions = _read_day_table(directory / "conditions.csv")
    dates = [f.stem for f in files]
    missing = [d for d in dates if d not in actuals or d not in conditions]
    extra = sorted(set(actuals) - set(dates))
    if missing or extra:
        raise DataError(f"date misalignment between ensembles and actuals: missing {missing[:3]}, extra {extra[:3]}")
    ens = []
    for f in files:
        try:
            ens.append(np.array([[float(v) for v in row] for row in _read_rows(f)]))
        except ValueError as exc:
            raise DataError(f"{f}: {exc}") from None
    shapes = {e.shape for e in ens}
    if len(shapes) != 1:
        raise DataError(f"ensemble files disagree in shape: {sorted(shapes)}")
    y = np.stack([actuals[d] for d in dates])
    c = np.stack([conditions[d] for d in dates])
    return np.stack(ens), y, c, dates


def _flatten(prefix, summary, lines):
    for lvl in summary["levels"]:
        tag = f"{prefix}pinc{round(lvl['pinc'] * 100):02d}"
        for key in ("picp", "ace", "ace_signed", "aw", "score"):
            lines.append(f"{tag}.{key} = {fmt(lvl[key])}")
    lines.append(f"{prefix}mse = {fmt(summary['mse'])}")


def cmd_evaluate(args):
    cfg = _config_near(args, args.ensembles, check_paths=False)
    out = _out_dir(cfg, args)
    ens, y, c, dates = load_generated(args.ensembles)
    summary, intervals, densities = evaluate(ens, y, cfg.eval.pinc, n_grid=cfg.eval.kde_grid)
    baseline, _, _ = evaluate(persistence_ensemble(c), y, cfg.eval.pinc, with_kl=False)
    summary["baseline_persistence"] = baseline
    summary["seed"] = cfg.seed
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    lines = [f"days = {summary['days']}", f"members = {summary['members']}"]
    _flatten("", summary, lines)
    for i, kl in enumerate(summary["kl_per_step"]):
        lines.append(f"kl_step{i:02d} = {'nan' if kl is None else fmt(kl)}")
    lines.append(f"kl_mean = {fmt(summary['kl_mean']) if summary['kl_mean'] is not None else 'nan'}")
    _flatten("baseline_persistence.", baseline, lines)
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")

    rows = []
    for p, iv in intervals.items():
        for d, day in enumerate(dates):
            for h in range(y.shape[1]):
                rows.append([fmt(p), day, h, fmt(iv.lower[d, h]), fmt(iv.upper[d, h]), fmt(y[d, h])])
    _write_rows(out / "intervals.csv", ["pinc", "date", "time", "lower", "upper", "actual"], rows)
    mean_curve = ens.mean(axis=1)
    _write_rows(out / "mean.csv", ["date", "time", "mean", "actual"],
                [[day, h, fmt(mean_curve[d, h]), fmt(y[d, h])] for d, day in enumerate(dates) for h in range(y.shape[1])])
    _write_rows(out / "kde.csv", ["step", "grid", "actual", "generated"],
                [[s.step, fmt(g), fmt(a), fmt(q)] for s in densities for g, a, q in zip(s.grid, s.actual, s.generated)])
    cfg.dump(out / "config.yaml")
    lvl = {round(v["pinc"], 6): v for v in summary["levels"]}
    head = ", ".join(f"PICP@{p:g}={v['picp']:.3f} AW={v['aw']:.4f}" for p, v in lvl.items())
    print(f"{head}, MSE={summary['mse']:.5f} -> {out}")
    return 0


# -- report ----------------------------------------------------------------------


def cmd_report(args):
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = _read_rows(run / "intervals.csv")
    if rows[:1] != [["pinc", "date", "time", "lower", "upper", "actual"]]:
        raise DataError(f"{run / 'intervals.csv'}: unexpected header {rows[:1]}")
    by_pinc = {}
    for row in rows[1:]:
        by_pinc.setdefault(row[0], []).append(row[1:])
    for p, body in by_pinc.items():
        _write_rows(out / f"bands_pinc{round(float(p) * 100):02d}.csv", ["date", "time", "lower", "upper", "actual"], body)
    mean_rows = _read_rows(run / "mean.csv")
    _write_rows(out / "mean_vs_actual.csv", mean_rows[0], mean_rows[1:])
    kde_rows = _read_rows(run / "kde.csv")
    _write_rows(out / "kde.csv", kde_rows[0], kde_rows[1:])
    if args.train:
        loss_rows = _read_rows(Path(args.train) / "loss_history.csv")
        _write_rows(out / "loss.csv", loss_rows[0], loss_rows[1:])
    print(f"report data -> {out}")
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--preset", choices=["paper", "desk"], help="named hyperparameter profile")
    common.add_argument("--out", help="output directory")
    common.add_argument("--pinc", type=float, action="append", help="nominal coverage, repeatable (0.9 or 90)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="loadiff", description="Diffusion-based day-ahead load scenarios")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit the denoiser")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="sample ensembles for test days")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", help="first test day, YYYY-MM-DD")
    p.add_argument("--end", help="last test day, YYYY-MM-DD")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score generated ensembles")
    p.add_argument("--ensembles", required=True, help="directory written by 'generate'")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="write plot-ready tables")
    p.add_argument("--run", required=True, help="directory written by 'evaluate'")
    p.add_argument("--train", help="directory written by 'train' (for the loss curve)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except LoadiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # malformed flag values (dates, mask strings) surface as plain ValueError
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
