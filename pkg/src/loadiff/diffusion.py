"""Conditional DDPM: noise schedule, forward corruption, training and sampling.

Step indices are 1-based (``t = 1..T``) at every public entry point; the
schedule arrays are stored 0-based, so ``beta[t - 1]`` is the variance of step t.

Any object exposing ``predict_noise(xt, c, t)`` with ``xt``/``c`` shaped
``[B, N, 1]`` and ``t`` an integer array ``[B]`` can be trained or sampled.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .tensor import Adam, Context, Tape, Tensor, backward, mean, mul, sub

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    beta_tilde: np.ndarray
    sqrt_alpha: np.ndarray
    sqrt_one_minus_alpha: np.ndarray

    @property
    def T(self):
        return self.beta.shape[0]

    def alpha_prev(self, t):
        """alpha_{t-1}, with alpha_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 1, self.alpha[np.maximum(t - 2, 0)], 1.0)


def build_schedule(T=1000, beta1=1e-4, betaT=0.5) -> NoiseSchedule:
    """Quadratic schedule: beta interpolates linearly in sqrt-space from beta1 to betaT."""
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ValueError(f"need 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={betaT}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = ((T - t) / (T - 1) * math.sqrt(beta1) + (t - 1) / (T - 1) * math.sqrt(betaT)) ** 2
    # the formula is exact at the ends; pin them so sqrt/square round-off cannot leak in
    beta[0] = beta1
    beta[-1] = betaT
    alpha = np.cumprod(1.0 - beta)
    alpha_prev = np.concatenate([[1.0], alpha[:-1]])
    beta_tilde = (1.0 - alpha_prev) / (1.0 - alpha) * beta
    arrays = [beta, alpha, beta_tilde, np.sqrt(alpha), np.sqrt(1.0 - alpha)]
    for a in arrays:
        a.flags.writeable = False
    return NoiseSchedule(*arrays)


def _check_steps(t, schedule):
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        if np.any(t != np.round(t)):
            raise ValueError("diffusion steps must be integers")
        t = t.astype(np.int64)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"diffusion step outside [1, {schedule.T}]")
    return t


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form ``x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps``.

    ``t`` is a scalar or one step per leading row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = _check_steps(t, schedule)
    a = schedule.sqrt_alpha[t - 1]
    s = schedule.sqrt_one_minus_alpha[t - 1]
    if t.ndim:
        a = a.reshape(a.shape + (1,) * (x0.ndim - 1))
        s = s.reshape(s.shape + (1,) * (x0.ndim - 1))
    return a * x0 + s * eps


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    c: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    xt: np.ndarray


def make_batch(x0, c, schedule: NoiseSchedule, ctx: Context) -> DiffusionBatch:
    x0 = np.asarray(x0, dtype=np.float64)
    t = ctx.integers(1, schedule.T, x0.shape[0])
    eps = ctx.normal(x0.shape)
    return DiffusionBatch(x0, np.asarray(c, dtype=np.float64), t, eps, forward_diffuse(x0, t, eps, schedule))


def training_loss(model, batch: DiffusionBatch) -> Tensor:
    """Mean squared error between the true and predicted noise over all points."""
    xt = batch.xt[..., None]
    c = batch.c[..., None]
    pred = model.predict_noise(xt, c, batch.t)
    diff = sub(pred, Tensor(batch.eps[..., None]))
    return mean(mul(diff, diff))


@dataclass
class TrainConfig:
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.5
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 60


@dataclass
class TrainResult:
    model: object
    loss_history: list = field(default_factory=list)
    seconds: float = 0.0


def train(model, x0, c, config: TrainConfig, ctx: Context, callback=None) -> TrainResult:
    """Minibatch Adam on the noise-prediction objective.

    ``x0`` and ``c`` are ``[D, N]`` arrays of target and condition curves.
    Day pairs are reshuffled every epoch from ``ctx``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise DataError("training set is empty")
    if c.shape != x0.shape:
        raise DataError(f"condition shape {c.shape} differs from target shape {x0.shape}")
    schedule = build_schedule(config.T, config.beta1, config.betaT)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    model.train()
    history = []
    started = time.perf_counter()
    n = x0.shape[0]
    for epoch in range(config.epochs):
        order = ctx.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = make_batch(x0[idx], c[idx], schedule, ctx)
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = training_loss(model, batch)
                backward(loss, tape)
            except NumericError as exc:
                raise NumericError(f"non-finite value in epoch {epoch + 1}, batch at {start}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss in epoch {epoch + 1}")
            opt.step()
            total += value * len(idx)
        history.append(total / n)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    model.eval()
    return TrainResult(model, history, time.perf_counter() - started)


DEFAULT_X0_RANGE = (-1.0, 2.0)


def sample(model, c, schedule: NoiseSchedule, ctx: Context, S=100, day_keys=None, chunk_rows=4096,
           x0_range=DEFAULT_X0_RANGE):
    """Ancestral sampling of ``S`` curves per condition.

    ``c`` is ``[N]`` (returns ``[S, N]``) or ``[D, N]`` (returns ``[D, S, N]``).
    Curve ``s`` of day ``d`` draws all of its noise from ``ctx.spawn(key_d, s)``,
    so results do not depend on how days are grouped into calls.

    ``x0_range`` bounds the clean-curve estimate implied by each noise
    prediction (see :func:`reverse_mean`); ``None`` disables the bound.
    """
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 1
    cond = c[None] if single else c
    n_days, n = cond.shape
    if S < 1:
        raise ValueError("need S >= 1")
    keys = list(range(n_days)) if day_keys is None else [int(k) for k in day_keys]
    if len(keys) != n_days:
        raise ValueError("day_keys length differs from number of conditions")
    model.eval()
    streams = [ctx.spawn(k, s) for k in keys for s in range(S)]
    rows = np.repeat(cond, S, axis=0)
    out = np.empty((n_days * S, n))
    for lo in range(0, len(streams), chunk_rows):
        hi = min(lo + chunk_rows, len(streams))
        out[lo:hi] = _reverse_chain(model, rows[lo:hi], schedule, streams[lo:hi], x0_range)
    out = out.reshape(n_days, S, n)
    return out[0] if single else out


def reverse_mean(xt, eps, t, schedule: NoiseSchedule, x0_range=None):
    """Mean of ``p(x_{t-1} | x_t)`` given the noise estimate ``eps`` at step ``t``.

    Unbounded, this is ``(x_t - beta_t / sqrt(1 - alpha_t) eps) / sqrt(1 - beta_t)``.
    With ``x0_range`` the same mean is assembled from the implied clean curve
    ``x0 = (x_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t)``, clipped to the
    range, so a noise estimate that is wrong far outside the training data
    cannot be amplified step after step. Inside the range both forms agree.
    """
    beta = schedule.beta[t - 1]
    if x0_range is None:
        return (xt - beta / schedule.sqrt_one_minus_alpha[t - 1] * eps) / math.sqrt(1.0 - beta)
    a = schedule.alpha[t - 1]
    a_prev = schedule.alpha[t - 2] if t > 1 else 1.0
    x0 = np.clip((xt - schedule.sqrt_one_minus_alpha[t - 1] * eps) / schedule.sqrt_alpha[t - 1], *x0_range)
    c0 = math.sqrt(a_prev) * beta / (1.0 - a)
    ct = math.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a)
    return c0 * x0 + ct * xt


def _reverse_chain(model, cond, schedule, streams, x0_range=None):
    n = cond.shape[1]
    x = np.stack([st.normal(n) for st in streams])
    c_col = cond[..., None]
    for t in range(schedule.T, 0, -1):
        steps = np.full(x.shape[0], t, dtype=np.int64)
        eps = model.predict_noise(x[..., None], c_col, steps)
        eps = (eps.data if isinstance(eps, Tensor) else np.asarray(eps))[..., 0]
        mu = reverse_mean(x, eps, t, schedule, x0_range)
        if t > 1:
            z = np.stack([st.normal(n) for st in streams])
            x = mu + math.sqrt(schedule.beta_tilde[t - 1]) * z
        else:
            x = mu
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step t={t}")
    return x


class OneStepOracle:
    """Exact noise predictor when the data distribution is a point mass at ``x0``."""

    def __init__(self, x0, schedule: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule

    def eval(self):
        return self

    def predict_noise(self, xt, c, t):
        t = np.asarray(t)
        a = self.schedule.sqrt_alpha[t - 1].reshape(-1, 1, 1)
        s = self.schedule.sqrt_one_minus_alpha[t - 1].reshape(-1, 1, 1)
        return (np.asarray(xt) - a * self.x0.reshape(1, -1, 1)) / s
