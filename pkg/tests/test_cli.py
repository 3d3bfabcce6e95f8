import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from loadiff.cli import load_generated, main
from loadiff.config import ConfigError, load_config
from loadiff.denoiser import load_checkpoint, save_checkpoint

TINY = {
    "data": {"synthetic_days": 20, "synthetic_seed": 1},
    "model": {"hidden": 8, "heads": ["global", "window:3"], "step_dim": 16},
    "train": {"T": 50, "epochs": 2, "batch_size": 8},
    "eval": {"samples": 10},
    "seed": 3,
}


def write_config(path, cfg=TINY):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "tiny.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(root / "train")]) == 0
    ckpt = root / "train" / "checkpoint.ldf"
    test_days = load_checkpoint(ckpt).metadata["test_days"]
    assert main(["generate", "--checkpoint", str(ckpt), "--out", str(root / "gen"),
                 "--start", test_days[0], "--end", test_days[0][:8] + "%02d" % (int(test_days[0][8:]) + 1)]) == 0
    assert main(["evaluate", "--ensembles", str(root / "gen"), "--out", str(root / "eval")]) == 0
    assert main(["report", "--run", str(root / "eval"), "--train", str(root / "train")]) == 0
    return root


# -- train ---------------------------------------------------------------------


def test_train_writes_three_artifacts(pipeline):
    names = sorted(p.name for p in (pipeline / "train").iterdir())
    assert names == ["checkpoint.ldf", "config.yaml", "loss_history.csv"]
    rows = (pipeline / "train" / "loss_history.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 3


def test_config_snapshot_records_seed(pipeline):
    for sub in ("train", "gen", "eval"):
        snap = yaml.safe_load((pipeline / sub / "config.yaml").read_text())
        assert snap["seed"] == 3 and snap["train"]["T"] == 50
    assert load_checkpoint(pipeline / "train" / "checkpoint.ldf").metadata["seed"] == 3


def test_train_rerun_identical_history(pipeline, tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path / "c.yaml")), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "loss_history.csv").read_bytes() == (pipeline / "train" / "loss_history.csv").read_bytes()
    assert (tmp_path / "t" / "checkpoint.ldf").read_bytes() == (pipeline / "train" / "checkpoint.ldf").read_bytes()


# -- generate ------------------------------------------------------------------


def test_generate_two_days_ten_members(pipeline):
    files = sorted((pipeline / "gen" / "ensembles").glob("*.csv"))
    assert len(files) == 2
    for f in files:
        rows = [r.split(",") for r in f.read_text().splitlines()]
        assert len(rows) == 10 and all(len(r) == 24 for r in rows)
    assert sorted(p.name for p in (pipeline / "gen" / "ensembles_mw").iterdir()) == [f.name for f in files]


def test_generated_mw_copy_matches_normalizer(pipeline):
    norm = json.loads((pipeline / "gen" / "normalizer.json").read_text())
    f = sorted((pipeline / "gen" / "ensembles").glob("*.csv"))[0]
    z = np.loadtxt(f, delimiter=",")
    mw = np.loadtxt(pipeline / "gen" / "ensembles_mw" / f.name, delimiter=",")
    np.testing.assert_allclose(mw, norm["min"] + z * (norm["max"] - norm["min"]), rtol=1e-12)


def test_generate_same_seed_identical(pipeline, tmp_path):
    ckpt = pipeline / "train" / "checkpoint.ldf"
    day = sorted((pipeline / "gen" / "ensembles").glob("*.csv"))[0].stem
    assert main(["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--start", day, "--end", day]) == 0
    assert (tmp_path / "ensembles" / f"{day}.csv").read_bytes() == \
        (pipeline / "gen" / "ensembles" / f"{day}.csv").read_bytes()


def test_generate_outside_test_range(pipeline, tmp_path, capsys):
    ckpt = pipeline / "train" / "checkpoint.ldf"
    train_first = load_checkpoint(ckpt).metadata["train_days"][0]
    assert main(["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--start", train_first]) == 3
    assert "outside the test range" in capsys.readouterr().err


def test_generate_step_count_mismatch(pipeline, tmp_path):
    cfg = dict(TINY, train=dict(TINY["train"], T=60))
    code = main(["generate", "--checkpoint", str(pipeline / "train" / "checkpoint.ldf"),
                 "--config", str(write_config(tmp_path / "c.yaml", cfg)), "--out", str(tmp_path / "g")])
    assert code != 0


def test_generate_nan_weights_numeric_exit(pipeline, tmp_path):
    model = load_checkpoint(pipeline / "train" / "checkpoint.ldf")
    bias = model.head.parameters()[-1]
    bias.assign(np.full(bias.shape, np.nan))
    save_checkpoint(model, tmp_path / "checkpoint.ldf", model.metadata)
    (tmp_path / "config.yaml").write_bytes((pipeline / "train" / "config.yaml").read_bytes())
    assert main(["generate", "--checkpoint", str(tmp_path / "checkpoint.ldf"), "--out", str(tmp_path / "g")]) == 4


# -- evaluate ------------------------------------------------------------------


def test_evaluate_report_schema(pipeline):
    m = json.loads((pipeline / "eval" / "metrics.json").read_text())
    assert [lv["pinc"] for lv in m["levels"]] == [0.8, 0.9, 0.95]
    assert len(m["kl_per_step"]) == 24 and m["seed"] == 3
    assert "baseline_persistence" in m
    text = (pipeline / "eval" / "metrics.txt").read_text()
    assert "pinc90.ace = " in text and "kl_step23 = " in text and "mse = " in text
    header = (pipeline / "eval" / "intervals.csv").read_text().splitlines()[0]
    assert header == "pinc,date,time,lower,upper,actual"


def _hand_fixture(root):
    # members {0, 1} at every hour; day A inside, day B 0.05 above the band
    (root / "ensembles").mkdir(parents=True)
    for day in ("2013-01-01", "2013-01-02"):
        (root / "ensembles" / f"{day}.csv").write_text(",".join(["0.0"] * 24) + "\n" + ",".join(["1.0"] * 24) + "\n")
    head = "date," + ",".join(f"h{h:02d}" for h in range(24)) + "\n"
    (root / "actuals.csv").write_text(head + "2013-01-01," + ",".join(["0.5"] * 24) + "\n"
                                      + "2013-01-02," + ",".join(["1.0"] * 24) + "\n")
    (root / "conditions.csv").write_text(head + "2013-01-01," + ",".join(["0.4"] * 24) + "\n"
                                         + "2013-01-02," + ",".join(["0.6"] * 24) + "\n")


def test_evaluate_hand_computed(tmp_path):
    _hand_fixture(tmp_path / "gen")
    assert main(["evaluate", "--ensembles", str(tmp_path / "gen"), "--out", str(tmp_path / "ev"), "--pinc", "90"]) == 0
    lv = json.loads((tmp_path / "ev" / "metrics.json").read_text())["levels"][0]
    # quantiles 0.05 and 0.95 of {0, 1}: band [0.05, 0.95], W = 0.9
    assert lv["picp"] == 0.5
    assert lv["ace"] == pytest.approx(0.4, abs=1e-12)
    assert lv["aw"] == pytest.approx(0.9, abs=1e-12)
    # inside: -2(0.1)(0.9) = -0.18; above by 0.05: -0.18 - 0.2 = -0.38
    assert lv["score"] == pytest.approx(-0.28, abs=1e-12)


def test_evaluate_misaligned_dates(tmp_path):
    _hand_fixture(tmp_path / "gen")
    (tmp_path / "gen" / "ensembles" / "2013-01-02.csv").rename(tmp_path / "gen" / "ensembles" / "2013-01-03.csv")
    assert main(["evaluate", "--ensembles", str(tmp_path / "gen"), "--out", str(tmp_path / "ev")]) == 3


def test_load_generated_shapes(pipeline):
    ens, y, c, dates = load_generated(pipeline / "gen")
    assert ens.shape == (2, 10, 24) and y.shape == c.shape == (2, 24) and len(dates) == 2


# -- report --------------------------------------------------------------------


def test_report_schema(pipeline):
    rep = pipeline / "eval" / "report"
    assert sorted(p.name for p in rep.iterdir()) == [
        "bands_pinc80.csv", "bands_pinc90.csv", "bands_pinc95.csv", "kde.csv", "loss.csv", "mean_vs_actual.csv"]
    assert (rep / "bands_pinc90.csv").read_text().splitlines()[0] == "date,time,lower,upper,actual"
    assert (rep / "kde.csv").read_text().splitlines()[0] == "step,grid,actual,generated"
    assert len((rep / "bands_pinc90.csv").read_text().splitlines()) == 1 + 2 * 24


def test_report_idempotent(pipeline, tmp_path):
    rep = pipeline / "eval" / "report"
    before = {p.name: p.read_bytes() for p in rep.iterdir()}
    assert main(["report", "--run", str(pipeline / "eval"), "--train", str(pipeline / "train")]) == 0
    assert {p.name: p.read_bytes() for p in rep.iterdir()} == before


def test_report_missing_inputs(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nothing")]) == 3


# -- configuration -------------------------------------------------------------


def test_missing_data_file_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"data": {"path": "absent.csv"}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "data.path" in capsys.readouterr().err


def test_unknown_field_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"train": {"epoch": 3}})
    assert main(["train", "--config", str(cfg)]) == 2
    assert "train.epoch" in capsys.readouterr().err


def test_preset_and_flag_precedence(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"train": {"T": 77}, "seed": 5})
    base = load_config(cfg, check_paths=False)
    assert base.train.T == 77 and base.seed == 5 and base.train.lr == 5e-4
    desk = load_config(cfg, preset="desk", seed=9, pinc=[90.0], check_paths=False)
    assert desk.train.T == 200 and desk.train.epochs == 30 and desk.data.last_days == 730
    assert desk.seed == 9 and desk.eval.pinc == [0.9]
    paper = load_config(None, preset="paper", check_paths=False)
    assert paper.train.T == 1000 and paper.train.epochs == 60 and paper.model.hidden == 128


def test_bad_pinc_rejected():
    with pytest.raises(ConfigError):
        load_config(None, pinc=[150.0], check_paths=False)


def test_console_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "loadiff.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("loadiff ")


def test_step_frequencies_validated(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, model=dict(TINY["model"], step_frequencies="log")))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "model.step_frequencies" in capsys.readouterr().err


def test_kde_grid_reaches_evaluate(tmp_path):
    _hand_fixture(tmp_path / "gen")
    (tmp_path / "gen" / "config.yaml").write_text(yaml.safe_dump({"eval": {"kde_grid": 64}}))
    assert main(["evaluate", "--ensembles", str(tmp_path / "gen"), "--out", str(tmp_path / "ev")]) == 0
    rows = (tmp_path / "ev" / "kde.csv").read_text().splitlines()
    assert len(rows) == 1 + 24 * 64
