"""Temporal multi-scale attention block.

Each head attends under its own mask (global, banded window, or dilated
window). The concatenated head outputs are projected by ``w_o`` and then
re-weighted per position by a learned temporal attention vector::

    T = softmax(tanh(x @ w_T) @ w_l)          # over the l sequence positions
    out = multihead(x) * (l * T) + x

Window half-width ``w`` means position i sees j when ``|i - j| <= w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .layers import Layer, uniform_init
from .tensor import Context, Tensor, add, as_tensor, concat, matmul, mul, scale, softmax, swapaxes, tanh

MASKED_LOGIT = -1e30


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    w: int = 0
    d: int = 0

    def __post_init__(self):
        if self.kind not in ("global", "window", "dilated"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind in ("window", "dilated") and self.w < 1:
            raise ValueError(f"{self.kind} mask needs w >= 1, got {self.w}")
        if self.kind == "dilated" and self.d < 1:
            raise ValueError(f"dilated mask needs d >= 1, got {self.d}")

    @classmethod
    def parse(cls, text):
        """``"global"``, ``"window:3"`` or ``"dilated:3:1"``."""
        if isinstance(text, MaskSpec):
            return text
        parts = str(text).strip().split(":")
        kind = parts[0]
        nums = [int(p) for p in parts[1:]]
        return cls(kind, *nums)

    def __str__(self):
        if self.kind == "global":
            return "global"
        if self.kind == "window":
            return f"window:{self.w}"
        return f"dilated:{self.w}:{self.d}"


@dataclass(frozen=True)
class AttentionMask:
    spec: MaskSpec
    n: int
    allowed: np.ndarray

    @property
    def kind(self):
        return self.spec.kind

    def logit_bias(self):
        return np.where(self.allowed, 0.0, MASKED_LOGIT)


@lru_cache(maxsize=256)
def _mask_matrix(spec: MaskSpec, n: int):
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    if spec.kind == "global":
        m = np.ones((n, n), dtype=bool)
    elif spec.kind == "window":
        m = dist <= spec.w
    else:
        step = spec.d + 1
        m = (dist <= spec.w * step) & (dist % step == 0)
    m.flags.writeable = False
    return m


def build_mask(kind, n, w=0, d=0) -> AttentionMask:
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    spec = kind if isinstance(kind, MaskSpec) else MaskSpec(kind, w, d)
    return AttentionMask(spec, n, _mask_matrix(spec, n))


def masked_attention(x, w_q, w_k, w_v, mask: AttentionMask, return_weights=False):
    """Scaled dot-product attention of one head under ``mask``."""
    x = as_tensor(x)
    if x.shape[-2] != mask.n:
        raise ShapeError(f"mask is for N={mask.n} but input has shape {list(x.shape)}")
    q = matmul(x, w_q)
    k = matmul(x, w_k)
    v = matmul(x, w_v)
    m = w_q.shape[-1]
    logits = add(scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(m)), Tensor(mask.logit_bias()))
    weights = softmax(logits, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


class AttentionHead(Layer):
    def __init__(self, hidden, head_dim, spec: MaskSpec, ctx: Context):
        self.spec = spec
        self.w_q = uniform_init(ctx, (hidden, head_dim), hidden)
        self.w_k = uniform_init(ctx, (hidden, head_dim), hidden)
        self.w_v = uniform_init(ctx, (hidden, head_dim), hidden)

    def __call__(self, x):
        return masked_attention(x, self.w_q, self.w_k, self.w_v, build_mask(self.spec, x.shape[-2]))


DEFAULT_HEADS = ("global", "window:3", "window:6", "dilated:3:1")


class MultiHeadAttention(Layer):
    """Heads with heterogeneous masks, concatenated and projected back to ``hidden``."""

    def __init__(self, hidden, ctx: Context, heads=DEFAULT_HEADS, head_dim=None):
        specs = [MaskSpec.parse(h) for h in heads]
        if not specs:
            raise ValueError("need at least one attention head")
        self.head_dim = head_dim or max(1, hidden // len(specs))
        self.heads = [AttentionHead(hidden, self.head_dim, s, ctx) for s in specs]
        self.w_o = uniform_init(ctx, (len(specs) * self.head_dim, hidden), len(specs) * self.head_dim)

    def __call__(self, x):
        outs = [head(x) for head in self.heads]
        stacked = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return matmul(stacked, self.w_o)


def multi_head(x, cfg: MultiHeadAttention):
    return cfg(as_tensor(x))


class TemporalAttention(Layer):
    def __init__(self, hidden, inner, ctx: Context):
        self.w_t = uniform_init(ctx, (hidden, inner), hidden)
        self.w_l = uniform_init(ctx, (inner, 1), inner)

    def __call__(self, x):
        """Position weights of shape ``[..., l, 1]`` summing to one over ``l``."""
        return softmax(matmul(tanh(matmul(x, self.w_t)), self.w_l), axis=-2)


def temporal_attention(x, params: TemporalAttention):
    """Probability vector over the sequence positions of ``x`` (``[l, H]``)."""
    return params(as_tensor(x)).reshape(x.shape[-2])


class TMSAB(Layer):
    def __init__(self, hidden, ctx: Context, heads=DEFAULT_HEADS, head_dim=None):
        self.attn = MultiHeadAttention(hidden, ctx, heads, head_dim)
        self.temporal = TemporalAttention(hidden, self.attn.head_dim, ctx)

    def __call__(self, x):
        x = as_tensor(x)
        length = x.shape[-2]
        weights = scale(self.temporal(x), float(length))
        return add(mul(self.attn(x), weights), x)


def tmsab_forward(x, block: TMSAB):
    return block(as_tensor(x))
