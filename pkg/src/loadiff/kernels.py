"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The module-level names (``lstm_forward``, ``lstm_backward``, ``gaussian_kde_eval``)
dispatch to numba unless ``LOADIFF_NUMBA=0``; the ``*_numpy`` / ``*_numba``
variants stay importable so both paths can be tested and benchmarked.

LSTM kernels work time-major: ``xw`` is ``[N, B, 4H]`` holding the input
contribution ``x @ W_x + b`` with gate blocks ordered (input, forget, output,
candidate). Hidden and cell state start at zero.
"""

import math

import numpy as np

from ._accel import HAS_NUMBA, USE_NUMBA, njit


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward_numpy(xw, w_h):
    n, b, h4 = xw.shape
    h = h4 // 4
    hs = np.empty((n, b, h))
    cs = np.empty((n, b, h))
    gates = np.empty((n, b, h4))
    h_prev = np.zeros((b, h))
    c_prev = np.zeros((b, h))
    for t in range(n):
        z = xw[t] + h_prev @ w_h
        g = gates[t]
        g[:, : 3 * h] = _sigmoid(z[:, : 3 * h])
        g[:, 3 * h :] = np.tanh(z[:, 3 * h :])
        c_prev = g[:, h : 2 * h] * c_prev + g[:, :h] * g[:, 3 * h :]
        h_prev = g[:, 2 * h : 3 * h] * np.tanh(c_prev)
        cs[t] = c_prev
        hs[t] = h_prev
    return hs, cs, gates


def lstm_backward_numpy(dhs, hs, cs, gates, w_h):
    n, b, h = dhs.shape
    dz = np.empty((n, b, 4 * h))
    dw_h = np.zeros_like(w_h)
    dh_next = np.zeros((b, h))
    dc_next = np.zeros((b, h))
    w_h_t = w_h.T
    for t in range(n - 1, -1, -1):
        ig = gates[t, :, :h]
        fg = gates[t, :, h : 2 * h]
        og = gates[t, :, 2 * h : 3 * h]
        gg = gates[t, :, 3 * h :]
        tc = np.tanh(cs[t])
        c_prev = cs[t - 1] if t > 0 else np.zeros((b, h))
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dh * og * (1.0 - tc * tc) + dc_next
        dz[t, :, :h] = dc * gg * ig * (1.0 - ig)
        dz[t, :, h : 2 * h] = dc * c_prev * fg * (1.0 - fg)
        dz[t, :, 2 * h : 3 * h] = do * og * (1.0 - og)
        dz[t, :, 3 * h :] = dc * ig * (1.0 - gg * gg)
        dc_next = dc * fg
        if t > 0:
            dw_h += hs[t - 1].T @ dz[t]
        dh_next = dz[t] @ w_h_t
    return dz, dw_h


@njit(fastmath=True)
def lstm_forward_numba(xw, w_h):
    # gates via exp rather than tanh: without SVML, scalar exp is the cheaper libm call
    n, b, h4 = xw.shape
    h = h4 // 4
    hs = np.empty((n, b, h))
    cs = np.empty((n, b, h))
    gates = np.empty((n, b, h4))
    h_prev = np.zeros((b, h))
    c_prev = np.zeros((b, h))
    for t in range(n):
        z = np.dot(h_prev, w_h)
        z += xw[t]
        for r in range(b):
            for j in range(3 * h):
                z[r, j] = 1.0 / (1.0 + math.exp(-z[r, j]))
            for j in range(3 * h, h4):
                z[r, j] = 2.0 / (1.0 + math.exp(-2.0 * z[r, j])) - 1.0
        gates[t] = z
        for r in range(b):
            for j in range(h):
                c = z[r, h + j] * c_prev[r, j] + z[r, j] * z[r, 3 * h + j]
                cs[t, r, j] = c
                c_prev[r, j] = c
                hs[t, r, j] = z[r, 2 * h + j] * (2.0 / (1.0 + math.exp(-2.0 * c)) - 1.0)
        h_prev = hs[t].copy()
    return hs, cs, gates


@njit
def lstm_backward_numba(dhs, hs, cs, gates, w_h):
    n, b, h = dhs.shape
    dz = np.empty((n, b, 4 * h))
    dw_h = np.zeros_like(w_h)
    dh_next = np.zeros((b, h))
    dc_next = np.zeros((b, h))
    w_h_t = np.ascontiguousarray(w_h.T)
    for t in range(n - 1, -1, -1):
        for r in range(b):
            for j in range(h):
                ig = gates[t, r, j]
                fg = gates[t, r, h + j]
                og = gates[t, r, 2 * h + j]
                gg = gates[t, r, 3 * h + j]
                tc = math.tanh(cs[t, r, j])
                c_prev = cs[t - 1, r, j] if t > 0 else 0.0
                dh = dhs[t, r, j] + dh_next[r, j]
                do = dh * tc
                dc = dh * og * (1.0 - tc * tc) + dc_next[r, j]
                dz[t, r, j] = dc * gg * ig * (1.0 - ig)
                dz[t, r, h + j] = dc * c_prev * fg * (1.0 - fg)
                dz[t, r, 2 * h + j] = do * og * (1.0 - og)
                dz[t, r, 3 * h + j] = dc * ig * (1.0 - gg * gg)
                dc_next[r, j] = dc * fg
        dzt = np.ascontiguousarray(dz[t])
        if t > 0:
            dw_h += np.dot(np.ascontiguousarray(hs[t - 1].T), dzt)
        dh_next = np.dot(dzt, w_h_t)
    return dz, dw_h


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def gaussian_kde_eval_numpy(grid, samples, bandwidth, chunk=256):
    """Gaussian KDE evaluated at ``grid``; chunked over the grid to bound memory."""
    out = np.empty(grid.shape[0])
    norm = 1.0 / (samples.shape[0] * bandwidth * _SQRT_2PI)
    for start in range(0, grid.shape[0], chunk):
        u = (grid[start : start + chunk, None] - samples[None, :]) / bandwidth
        out[start : start + chunk] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out


# Beyond |u| = 9 a kernel contributes < 3e-18 of its peak; the sweep stops there.
_KDE_CUTOFF = 9.0
# Exact exp() every this many recurrence steps keeps rounding drift near 1e-13.
_KDE_REANCHOR = 64


@njit
def _kde_direct(grid, samples, bandwidth):
    g = grid.shape[0]
    n = samples.shape[0]
    out = np.zeros(g)
    inv_h = 1.0 / bandwidth
    for i in range(g):
        acc = 0.0
        for k in range(n):
            u = (grid[i] - samples[k]) * inv_h
            acc += math.exp(-0.5 * u * u)
        out[i] = acc
    return out


@njit
def _kde_uniform(x0, step, g, samples, bandwidth):
    """Sum of kernels on ``x0 + i*step`` via exp(-u^2/2) ratio recurrences.

    Moving one grid point right multiplies a kernel by ``exp(-u a - a^2/2)``
    (``a = step / h``) and that ratio itself shrinks by ``exp(-a^2)`` per
    step, so each sample costs a few exp() calls plus multiplications.
    """
    out = np.zeros(g)
    a = step / bandwidth
    q = math.exp(-a * a)
    reach = int(_KDE_CUTOFF / a) + 1
    for k in range(samples.shape[0]):
        s = samples[k]
        i0 = int(round((s - x0) / step))
        i0 = min(max(i0, 0), g - 1)
        hi = min(g - 1, i0 + reach)
        lo = max(0, i0 - reach)
        # rightwards from i0
        i = i0
        while i <= hi:
            u = (x0 + i * step - s) / bandwidth
            e = math.exp(-0.5 * u * u)
            r = math.exp(-u * a - 0.5 * a * a)
            stop = min(hi, i + _KDE_REANCHOR - 1)
            while True:
                out[i] += e
                if i == stop:
                    break
                e *= r
                r *= q
                i += 1
            i += 1
        # leftwards from i0 - 1
        i = i0 - 1
        while i >= lo:
            u = (x0 + i * step - s) / bandwidth
            e = math.exp(-0.5 * u * u)
            r = math.exp(u * a - 0.5 * a * a)
            stop = max(lo, i - _KDE_REANCHOR + 1)
            while True:
                out[i] += e
                if i == stop:
                    break
                e *= r
                r *= q
                i -= 1
            i -= 1
    return out


@njit
def gaussian_kde_eval_numba(grid, samples, bandwidth):
    g = grid.shape[0]
    norm = 1.0 / (samples.shape[0] * bandwidth * _SQRT_2PI)
    uniform = g >= 3
    step = 0.0
    if uniform:
        step = (grid[g - 1] - grid[0]) / (g - 1)
        tol = 1e-12 * (abs(grid[0]) + abs(grid[g - 1]) + abs(step))
        uniform = step > 0.0
        for i in range(g):
            if abs(grid[i] - (grid[0] + i * step)) > tol:
                uniform = False
                break
    if uniform:
        out = _kde_uniform(grid[0], step, g, samples, bandwidth)
    else:
        out = _kde_direct(grid, samples, bandwidth)
    for i in range(g):
        out[i] *= norm
    return out


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


if USE_NUMBA:
    BACKEND = "numba"

    def lstm_forward(xw, w_h):
        return lstm_forward_numba(*_contig(xw, w_h))

    def lstm_backward(dhs, hs, cs, gates, w_h):
        return lstm_backward_numba(*_contig(dhs, hs, cs, gates, w_h))

    def gaussian_kde_eval(grid, samples, bandwidth):
        grid, samples = _contig(grid, samples)
        return gaussian_kde_eval_numba(grid, samples, float(bandwidth))

else:
    BACKEND = "numpy"
    lstm_forward = lstm_forward_numpy
    lstm_backward = lstm_backward_numpy
    gaussian_kde_eval = gaussian_kde_eval_numpy


__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "gaussian_kde_eval",
    "gaussian_kde_eval_numba",
    "gaussian_kde_eval_numpy",
    "lstm_backward",
    "lstm_backward_numba",
    "lstm_backward_numpy",
    "lstm_forward",
    "lstm_forward_numba",
    "lstm_forward_numpy",
]
