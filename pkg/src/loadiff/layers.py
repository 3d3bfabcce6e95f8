"""Neural building blocks on top of :mod:`loadiff.tensor`.

Sequences are laid out ``[..., N, features]``; an optional leading batch axis
is carried through every layer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import ShapeError
from .tensor import Context, Tensor, add, apply_op, as_tensor, matmul, mul, silu


def uniform_init(ctx: Context, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(ctx.uniform(shape, -bound, bound), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Layer:
    """Parameter container. Parameters are discovered in attribute order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def sublayers(self):
        for value in vars(self).values():
            if isinstance(value, Layer):
                yield value
                yield from value.sublayers()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield item
                        yield from item.sublayers()

    def train(self, mode=True):
        self.training = mode
        for layer in self.sublayers():
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)


class DenseLayer(Layer):
    def __init__(self, n_in, n_out, ctx: Context):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = uniform_init(ctx, (n_in, n_out), n_in)
        self.bias = zeros_param((n_out,))

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim == 0 or x.shape[-1] != self.n_in:
            raise ShapeError(f"dense layer expects last dim {self.n_in}, got shape {list(x.shape)}")
        if x.ndim == 1:
            return add(matmul(x.reshape(1, -1), self.weight).reshape(self.n_out), self.bias)
        return add(matmul(x, self.weight), self.bias)


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Fused LSTM over the sequence axis; returns every hidden state.

    Gate blocks in ``w_x``/``w_h``/``b`` are ordered (input, forget, output, candidate).
    """
    single = x.ndim == 2
    xb = x.data[None] if single else x.data
    nb, n, d = xb.shape
    h4 = w_h.shape[1]
    flat_x = xb.reshape(-1, d)
    xw = (flat_x @ w_x.data + b.data).reshape(nb, n, h4).transpose(1, 0, 2)
    hs, cs, gates = kernels.lstm_forward(xw, w_h.data)
    out = hs.transpose(1, 0, 2)

    def grad(g):
        gb = g[None] if single else g
        dz, dw_h = kernels.lstm_backward(
            np.ascontiguousarray(gb.transpose(1, 0, 2)), hs, cs, gates, w_h.data
        )
        dz_flat = dz.transpose(1, 0, 2).reshape(-1, h4)
        dx = (dz_flat @ w_x.data.T).reshape(xb.shape)
        return (dx[0] if single else dx), flat_x.T @ dz_flat, dw_h, dz_flat.sum(axis=0)

    return apply_op(out[0] if single else out, (x, w_x, w_h, b), grad)


class LstmLayer(Layer):
    """Single-layer unidirectional LSTM with zero initial state."""

    def __init__(self, n_in, hidden, ctx: Context):
        self.n_in = n_in
        self.hidden = hidden
        self.w_x = uniform_init(ctx, (n_in, 4 * hidden), hidden)
        self.w_h = uniform_init(ctx, (hidden, 4 * hidden), hidden)
        self.b = zeros_param((4 * hidden,))

    def __call__(self, seq):
        seq = as_tensor(seq)
        if seq.ndim not in (2, 3) or seq.shape[-1] != self.n_in or seq.shape[-2] < 1:
            raise ShapeError(f"LSTM expects [..., N, {self.n_in}], got {list(seq.shape)}")
        return lstm_sequence(seq, self.w_x, self.w_h, self.b)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-D convolution (cross-correlation) with zero padding.

    ``x`` is ``[..., N, C_in]``, ``kernel`` is ``[C_out, C_in, K]``.
    """
    c_out, c_in, k = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got shape {list(x.shape)}")
    single = x.ndim == 2
    xb = x.data[None] if single else x.data
    nb, n, _ = xb.shape
    pad_l = (k - 1) // 2
    pad_r = k - 1 - pad_l
    xp = np.pad(xb, ((0, 0), (pad_l, pad_r), (0, 0)))
    cols = sliding_window_view(xp, k, axis=1).reshape(nb * n, c_in * k)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = (cols @ w2.T + bias.data).reshape(nb, n, c_out)

    def grad(g):
        g2 = (g[None] if single else g).reshape(nb * n, c_out)
        dw = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ w2).reshape(nb, n, c_in, k)
        dxp = np.zeros(xp.shape)
        for j in range(k):
            dxp[:, j : j + n, :] += dcols[:, :, :, j]
        dx = dxp[:, pad_l : pad_l + n, :]
        return (dx[0] if single else dx), dw, g2.sum(axis=0)

    return apply_op(out[0] if single else out, (x, kernel, bias), grad)


class Conv1D(Layer):
    def __init__(self, in_channels, out_channels, width, ctx: Context):
        if width < 1:
            raise ValueError("kernel width must be >= 1")
        self.kernel = uniform_init(ctx, (out_channels, in_channels, width), in_channels * width)
        self.bias = zeros_param((out_channels,))

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim not in (2, 3):
            raise ShapeError(f"conv1d expects [..., N, C], got {list(x.shape)}")
        return conv1d(x, self.kernel, self.bias)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, rate=0.3):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, ctx: Context):
        if not self.training or self.rate == 0.0:
            return x
        keep = ctx.uniform(x.shape) >= self.rate
        return mul(x, Tensor(keep / (1.0 - self.rate)))


def dropout_apply(d: Dropout, x, ctx: Context):
    return d(as_tensor(x), ctx)


# -- diffusion-step embedding -------------------------------------------------


STEP_FREQUENCIES = ("literal", "inverse")


def sinusoidal_embedding(t, dim=64, frequencies="literal"):
    """Sine block then cosine block at frequencies ``10 ** (4k / (dim/2 - 1))``.

    Every literal frequency is at least 1 rad per step, so integer steps land
    on scattered phases. ``frequencies="inverse"`` flips the exponent sign
    (``10 ** (-4k / (dim/2 - 1))``), the usual positional-encoding layout in
    which neighbouring steps get nearby codes.

    Accepts a scalar or an array of steps; no range checking.
    """
    if frequencies not in STEP_FREQUENCIES:
        raise ValueError(f"frequencies must be one of {STEP_FREQUENCIES}, got {frequencies!r}")
    half = dim // 2
    sign = 1.0 if frequencies == "literal" else -1.0
    freqs = 10.0 ** (sign * 4.0 * np.arange(half) / (half - 1))
    arg = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def step_embedding(t, n_steps, dim=64, frequencies="literal"):
    steps = np.asarray(t)
    if np.any(steps < 1) or np.any(steps > n_steps):
        raise ValueError(f"diffusion step {t} outside [1, {n_steps}]")
    return sinusoidal_embedding(steps, dim, frequencies)


class StepEmbedMLP(Layer):
    """``silu(fc2(silu(fc1(e))))``."""

    def __init__(self, n_in, hidden, ctx: Context):
        self.fc1 = DenseLayer(n_in, hidden, ctx)
        self.fc2 = DenseLayer(hidden, hidden, ctx)

    def __call__(self, e):
        return silu(self.fc2(silu(self.fc1(e))))


class ConditionEmbed(Layer):
    """Stack of 1x1 convolutions lifting the condition curve to ``hidden`` channels."""

    def __init__(self, hidden, length, ctx: Context, n_layers=2):
        self.length = length
        chans = [1] + [hidden] * n_layers
        self.convs = [Conv1D(a, b, 1, ctx) for a, b in zip(chans[:-1], chans[1:])]

    def __call__(self, c):
        c = as_tensor(c)
        if c.ndim < 2 or c.shape[-2] != self.length or c.shape[-1] != 1:
            raise ShapeError(f"condition must be [..., {self.length}, 1], got {list(c.shape)}")
        out = c
        for i, conv in enumerate(self.convs):
            if i:
                out = silu(out)
            out = conv(out)
        return out


class ConvHead(Layer):
    """Width-3 conv, SiLU, width-3 conv down to one output channel."""

    def __init__(self, hidden, ctx: Context, width=3):
        self.conv1 = Conv1D(hidden, hidden, width, ctx)
        self.conv2 = Conv1D(hidden, 1, width, ctx)

    def __call__(self, x):
        return self.conv2(silu(self.conv1(x)))
