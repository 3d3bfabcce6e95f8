import numpy as np
import pytest

from loadiff.denoiser import (
    MAGIC,
    DenoiserModel,
    ModelConfig,
    init_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from loadiff.diffusion import build_schedule, make_batch, training_loss
from loadiff.errors import CheckpointError, ShapeError
from loadiff.tensor import Context, Tape, backward, gradcheck, numerical_gradient, relative_error


def small_config(**kw):
    base = dict(hidden=8, seq_len=24, n_steps=1000, heads=("global", "window:3"), dropout=0.3)
    base.update(kw)
    return ModelConfig(**base)


def test_output_shapes():
    model = init_model(small_config(), seed=0)
    ctx = Context(1)
    assert model.predict_noise(ctx.normal((24, 1)), ctx.normal((24, 1)), 5).shape == (24, 1)
    assert model.predict_noise(ctx.normal((3, 24, 1)), ctx.normal((3, 24, 1)), np.array([1, 2, 3])).shape == (3, 24, 1)


def test_shape_errors():
    model = init_model(small_config(), seed=0)
    with pytest.raises(ShapeError):
        model.predict_noise(np.zeros((23, 1)), np.zeros((23, 1)), 1)
    with pytest.raises(ShapeError):
        model.predict_noise(np.zeros((24, 1)), np.zeros((2, 24, 1)), 1)
    with pytest.raises(ValueError):
        model.predict_noise(np.zeros((24, 1)), np.zeros((24, 1)), 1001)


def test_step_and_condition_sensitivity():
    model = init_model(ModelConfig(), seed=0)
    ctx = Context(2)
    x, c = ctx.normal((24, 1)), ctx.uniform((24, 1))
    base = model.predict_noise(x, c, 1).data
    assert np.max(np.abs(base - model.predict_noise(x, c, 500).data)) > 1e-8
    assert np.max(np.abs(base - model.predict_noise(x, c + 0.1, 1).data)) > 1e-8


def test_eval_mode_is_deterministic():
    model = init_model(small_config(), seed=0)
    ctx = Context(3)
    x, c = ctx.normal((24, 1)), ctx.normal((24, 1))
    assert np.array_equal(model.predict_noise(x, c, 7).data, model.predict_noise(x, c, 7).data)


def test_same_seed_same_parameters():
    a, b = init_model(small_config(), 4), init_model(small_config(), 4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    c = init_model(small_config(), 5)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_parameter_count_default_model():
    model = init_model(ModelConfig(), 0)
    assert model.parameter_count() > 10_000
    # dense 1->H, LSTM, step MLP, condition convs, attention, temporal, conv head
    h = 128
    m = h // 4
    expected = (2 * h) + (4 * h * (2 * h + 1)) + (64 * h + h + h * h + h) + (h + h + h * h + h)
    expected += 4 * 3 * h * m + 4 * m * h + (h * m + m) + (3 * h * h + h + 3 * h + 1)
    assert model.parameter_count() == expected


def test_degenerate_hidden_one():
    model = init_model(ModelConfig(hidden=1, heads=("global",)), 0)
    assert model.predict_noise(np.zeros((24, 1)), np.zeros((24, 1)), 3).shape == (24, 1)


def test_every_parameter_gets_gradient():
    model = init_model(small_config(dropout=0.0), 0)
    model.train()
    ctx = Context(5)
    x0 = ctx.uniform((4, 24))
    batch = make_batch(x0, x0, build_schedule(1000), ctx)
    with Tape() as tape:
        loss = training_loss(model, batch)
    backward(loss, tape)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0.0), name


def test_full_model_gradcheck_tiny():
    cfg = ModelConfig(hidden=4, seq_len=6, n_steps=50, heads=("global", "window:1"), dropout=0.0)
    model = init_model(cfg, 0)
    ctx = Context(6)
    x0 = ctx.uniform((2, 6))
    batch = make_batch(x0, x0, build_schedule(50), ctx)
    fn = lambda: training_loss(model, batch)  # noqa: E731
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    params = model.parameters()
    picks = ctx.integers(0, len(params) - 1, 20)
    for i in picks:
        p = params[i]
        num = numerical_gradient(fn, p)
        assert relative_error(p.grad, num) < 1e-3


def test_gradcheck_helper_on_submodule():
    cfg = ModelConfig(hidden=4, seq_len=6, n_steps=10, heads=("global",), dropout=0.0)
    model = init_model(cfg, 1)
    ctx = Context(7)
    x0 = ctx.uniform((2, 6))
    batch = make_batch(x0, x0, build_schedule(10), ctx)
    assert gradcheck(lambda: training_loss(model, batch), model.head.parameters()) < 1e-4


def test_dropout_active_only_in_training():
    model = init_model(small_config(dropout=0.5), 0)
    ctx = Context(8)
    x, c = ctx.normal((24, 1)), ctx.normal((24, 1))
    model.train()
    a = model.predict_noise(x, c, 3).data
    b = model.predict_noise(x, c, 3).data
    assert not np.array_equal(a, b)
    model.eval()
    assert np.array_equal(model.predict_noise(x, c, 3).data, model.predict_noise(x, c, 3).data)


# -- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = init_model(small_config(), 9)
    path = tmp_path / "m.ldf"
    save_checkpoint(model, path, {"seed": 9, "note": "x"})
    loaded = load_checkpoint(path)
    assert isinstance(loaded, DenoiserModel)
    assert loaded.config == model.config
    assert loaded.metadata == {"seed": 9, "note": "x"}
    for (n1, p), (n2, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p.data.tobytes() == q.data.tobytes()
    assert path.read_bytes()[: len(MAGIC)] == MAGIC


def test_checkpoint_bytes_are_stable(tmp_path):
    model = init_model(small_config(), 9)
    save_checkpoint(model, tmp_path / "a.ldf", {"seed": 9})
    save_checkpoint(load_checkpoint(tmp_path / "a.ldf"), tmp_path / "b.ldf", {"seed": 9})
    assert (tmp_path / "a.ldf").read_bytes() == (tmp_path / "b.ldf").read_bytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ldf"
    save_checkpoint(init_model(small_config(), 0), path)
    raw = path.read_bytes()
    for cut in (5, 40, len(raw) // 2, len(raw) - 1):
        (tmp_path / "cut.ldf").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.ldf")


def test_checkpoint_bit_flip(tmp_path):
    path = tmp_path / "m.ldf"
    save_checkpoint(init_model(small_config(), 0), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    import zlib

    path = tmp_path / "m.ldf"
    save_checkpoint(init_model(small_config(), 0), path)
    raw = bytearray(path.read_bytes()[:-4])
    raw[8:12] = struct.pack("<I", 99)
    body = bytes(raw)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(path)


def test_checkpoint_sequence_length_mismatch(tmp_path):
    path = tmp_path / "m.ldf"
    save_checkpoint(init_model(small_config(seq_len=12), 0), path)
    with pytest.raises(CheckpointError, match="sequence length"):
        load_checkpoint(path, expected_seq_len=24)
