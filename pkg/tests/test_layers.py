import math

import numpy as np
import pytest

from loadiff import kernels
from loadiff.errors import ShapeError
from loadiff.layers import (
    ConditionEmbed,
    Conv1D,
    ConvHead,
    DenseLayer,
    Dropout,
    LstmLayer,
    StepEmbedMLP,
    dropout_apply,
    sinusoidal_embedding,
    step_embedding,
)
from loadiff.tensor import Context, Tensor, gradcheck, mul, sum_, tanh


def _set(param, values):
    param.assign(np.asarray(values, dtype=np.float64).reshape(param.shape))


def _zero_all(layer):
    for p in layer.parameters():
        p.assign(np.zeros(p.shape))


# -- dense ---------------------------------------------------------------------


def test_dense_identity():
    d = DenseLayer(3, 3, Context(0))
    _set(d.weight, np.eye(3))
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(d(x).data, x)


def test_dense_hand_value():
    d = DenseLayer(1, 1, Context(0))
    _set(d.weight, [[2.0]])
    _set(d.bias, [1.0])
    assert d(np.array([3.0])).data.tolist() == [7.0]


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        DenseLayer(3, 2, Context(0))(np.ones((4, 2)))


def test_dense_gradcheck():
    ctx = Context(1)
    d = DenseLayer(3, 2, ctx)
    x = Tensor(ctx.normal((4, 3)), requires_grad=True)
    assert gradcheck(lambda: sum_(tanh(d(x))), [x, d.weight, d.bias]) < 1e-4


# -- LSTM ----------------------------------------------------------------------


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_oracle(x, w_x, w_h, b):
    """Textbook per-step LSTM cell, written independently of the fused kernel."""
    hidden = w_h.shape[0]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    out = []
    for xt in x:
        z = xt @ w_x + h @ w_h + b
        i, f, o, g = (z[k * hidden : (k + 1) * hidden] for k in range(4))
        c = _sig(f) * c + _sig(i) * np.tanh(g)
        h = _sig(o) * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_lstm_zero_parameters_give_zero_states():
    layer = LstmLayer(3, 5, Context(0))
    _zero_all(layer)
    out = layer(Context(1).normal((7, 3)) * 10.0)
    assert np.array_equal(out.data, np.zeros((7, 5)))


def test_lstm_matches_textbook_cell():
    ctx = Context(2)
    layer = LstmLayer(3, 4, ctx)
    x = ctx.normal((6, 3))
    expected = lstm_oracle(x, layer.w_x.data, layer.w_h.data, layer.b.data + 0.1)
    _set(layer.b, layer.b.data + 0.1)
    np.testing.assert_allclose(layer(x).data, expected, rtol=1e-12, atol=1e-14)


def test_lstm_single_step_is_one_cell():
    ctx = Context(3)
    layer = LstmLayer(2, 3, ctx)
    x = ctx.normal((1, 2))
    z = x[0] @ layer.w_x.data + layer.b.data
    i, f, o, g = np.split(z, 4)
    h = _sig(o) * np.tanh(_sig(i) * np.tanh(g))
    np.testing.assert_allclose(layer(x).data[0], h, rtol=1e-13)


def test_lstm_batch_equals_per_sequence():
    ctx = Context(4)
    layer = LstmLayer(2, 3, ctx)
    x = ctx.normal((5, 6, 2))
    batched = layer(x).data
    for i in range(5):
        np.testing.assert_allclose(batched[i], layer(x[i]).data, rtol=1e-13)


def test_lstm_gradcheck():
    ctx = Context(5)
    layer = LstmLayer(2, 3, ctx)
    x = Tensor(ctx.normal((2, 5, 2)), requires_grad=True)
    w = Tensor(ctx.normal((2, 5, 3)))
    fn = lambda: sum_(mul(layer(x), w))  # noqa: E731
    assert gradcheck(fn, [x, layer.w_x, layer.w_h, layer.b]) < 1e-4


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")
def test_numba_and_numpy_kernels_agree():
    ctx = Context(6)
    xw = ctx.normal((7, 5, 12))
    w_h = ctx.normal((3, 12)) * 0.5
    fwd_np = kernels.lstm_forward_numpy(xw, w_h)
    fwd_nb = kernels.lstm_forward_numba(xw, w_h)
    for a, b in zip(fwd_np, fwd_nb):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    dhs = ctx.normal((7, 5, 3))
    for a, b in zip(kernels.lstm_backward_numpy(dhs, *fwd_np, w_h), kernels.lstm_backward_numba(dhs, *fwd_np, w_h)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    grid = np.linspace(-3, 3, 50)
    samples = ctx.normal(200)
    np.testing.assert_allclose(
        kernels.gaussian_kde_eval_numpy(grid, samples, 0.3),
        kernels.gaussian_kde_eval_numba(grid, samples, 0.3),
        rtol=1e-12,
    )



@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("n_grid,bandwidth", [(512, 0.2), (512, 0.01), (7, 2.0), (300, 0.05)])
def test_kde_recurrence_matches_direct_sum(n_grid, bandwidth):
    # uniform grids take the recurrence path; kernels past 9 bandwidths are dropped
    samples = Context(11).normal(1000)
    grid = np.linspace(samples.min() - 3 * bandwidth, samples.max() + 3 * bandwidth, n_grid)
    ref = kernels.gaussian_kde_eval_numpy(grid, samples, bandwidth)
    got = kernels.gaussian_kde_eval_numba(grid, samples, bandwidth)
    np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-15 * ref.max())


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")
def test_kde_nonuniform_grid_uses_direct_sum():
    ctx = Context(12)
    grid = np.sort(ctx.uniform(60) * 6 - 3)
    samples = ctx.normal(100)
    np.testing.assert_allclose(
        kernels.gaussian_kde_eval_numba(grid, samples, 0.3),
        kernels.gaussian_kde_eval_numpy(grid, samples, 0.3),
        rtol=1e-13,
    )


# -- convolution ---------------------------------------------------------------


def test_conv_width_one_identity():
    conv = Conv1D(1, 1, 1, Context(0))
    _set(conv.kernel, [1.0])
    x = np.array([[0.3], [-1.0], [2.0]])
    np.testing.assert_array_equal(conv(x).data, x)


def test_conv_hand_example():
    conv = Conv1D(1, 1, 3, Context(0))
    _set(conv.kernel, [1.0, 1.0, 1.0])
    out = conv(np.array([0.0, 1.0, 0.0, 0.0]).reshape(4, 1)).data.ravel()
    assert out.tolist() == [1.0, 1.0, 1.0, 0.0]


@pytest.mark.parametrize("width", [1, 2, 3, 4, 5])
def test_conv_preserves_length(width):
    conv = Conv1D(2, 3, width, Context(width))
    assert conv(np.ones((9, 2))).shape == (9, 3)
    assert conv(np.ones((4, 9, 2))).shape == (4, 9, 3)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        Conv1D(2, 3, 3, Context(0))(np.ones((5, 4)))


def test_conv_gradcheck():
    ctx = Context(7)
    conv = Conv1D(2, 3, 3, ctx)
    x = Tensor(ctx.normal((2, 6, 2)), requires_grad=True)
    assert gradcheck(lambda: sum_(tanh(conv(x))), [x, conv.kernel, conv.bias]) < 1e-4


# -- dropout -------------------------------------------------------------------


def test_dropout_eval_and_zero_rate_are_identity():
    x = Tensor(np.arange(5.0))
    d = Dropout(0.3).eval()
    assert dropout_apply(d, x, Context(0)) is x
    assert dropout_apply(Dropout(0.0), x, Context(0)) is x


def test_dropout_survival_fraction():
    out = dropout_apply(Dropout(0.3), Tensor(np.ones(100_000)), Context(0)).data
    assert abs(np.mean(out != 0.0) - 0.7) < 0.01
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}


def test_dropout_expectation():
    ctx = Context(1)
    x = Tensor(np.linspace(0.5, 2.0, 20))
    draws = np.mean([dropout_apply(Dropout(0.3), x, ctx).data for _ in range(3000)], axis=0)
    assert np.all(np.abs(draws / x.data - 1.0) < 0.02 * 3)
    assert abs(draws.mean() / x.data.mean() - 1.0) < 0.02


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        Dropout(1.0)


# -- embeddings ----------------------------------------------------------------


def test_embedding_at_zero():
    e = sinusoidal_embedding(0)
    assert np.array_equal(e[:32], np.zeros(32)) and np.array_equal(e[32:], np.ones(32))


def test_embedding_first_entry():
    assert step_embedding(1, 1000)[0] == pytest.approx(0.8414709848, abs=1e-9)
    assert step_embedding(1, 1000)[32] == pytest.approx(math.cos(1.0), abs=1e-15)


def test_embedding_frequencies():
    t = 3
    k = np.arange(32)
    np.testing.assert_allclose(step_embedding(t, 1000)[:32], np.sin(10.0 ** (4 * k / 31) * t), rtol=1e-15)


def test_embedding_length_and_range():
    assert step_embedding(np.array([1, 500, 1000]), 1000).shape == (3, 64)
    with pytest.raises(ValueError):
        step_embedding(0, 1000)
    with pytest.raises(ValueError):
        step_embedding(1001, 1000)


def test_embedding_injective():
    e = step_embedding(np.arange(1, 1001), 1000)
    d2 = (e * e).sum(1)[:, None] + (e * e).sum(1)[None, :] - 2 * e @ e.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-6


def test_step_mlp_zero_weights():
    mlp = StepEmbedMLP(64, 8, Context(0))
    _zero_all(mlp)
    assert np.array_equal(mlp(step_embedding(5, 10)).data, np.zeros(8))


def test_step_mlp_zero_second_layer():
    mlp = StepEmbedMLP(4, 4, Context(0))
    _set(mlp.fc1.weight, np.eye(4))
    _zero_all(mlp.fc2)
    assert np.array_equal(mlp(np.ones(4)).data, np.zeros(4))


def test_step_mlp_gradcheck():
    ctx = Context(8)
    mlp = StepEmbedMLP(6, 5, ctx)
    e = Tensor(ctx.normal((3, 6)), requires_grad=True)
    assert gradcheck(lambda: sum_(tanh(mlp(e))), [e] + mlp.parameters()) < 1e-4


def test_condition_embed_cases():
    ctx = Context(9)
    emb = ConditionEmbed(5, 24, ctx)
    assert emb(ctx.normal((24, 1))).shape == (24, 5)
    _zero_all(emb)
    assert np.array_equal(emb(ctx.normal((24, 1))).data, np.zeros((24, 5)))
    one = ConditionEmbed(1, 4, ctx, n_layers=1)
    _set(one.convs[0].kernel, [1.0])
    c = ctx.normal((4, 1))
    np.testing.assert_array_equal(one(c).data, c)
    with pytest.raises(ShapeError):
        emb(np.ones((23, 1)))


def test_conv_head_shape():
    head = ConvHead(6, Context(0))
    assert head(np.ones((3, 24, 6))).shape == (3, 24, 1)


def test_inverse_frequencies_are_smooth_in_t():
    lit = sinusoidal_embedding(np.arange(1, 201), 64)
    inv = sinusoidal_embedding(np.arange(1, 201), 64, frequencies="inverse")
    assert inv[0, 0] == pytest.approx(np.sin(1.0)) and inv[0, 31] == pytest.approx(np.sin(1e-4))
    # neighbouring steps: inverse codes move little, literal codes jump
    assert np.max(np.linalg.norm(np.diff(inv, axis=0), axis=1)) < 2.0
    assert np.min(np.linalg.norm(np.diff(lit, axis=0), axis=1)) > 2.0
    with pytest.raises(ValueError):
        sinusoidal_embedding(1, 64, frequencies="log")
