"""The noise-prediction network and its checkpoint format.

Data flow for one condition day::

    x_t [N,1] -> dense 1->H -> LSTM -> dropout ---------+
    t -> sinusoidal(64) -> FC+SiLU -> FC+SiLU (bcast) --+--> TMSAB -> dropout -> conv head -> [N,1]
    c [N,1] -> 1x1 conv -> SiLU -> 1x1 conv ------------+

The three streams are summed before the attention block.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import DEFAULT_HEADS, TMSAB, MaskSpec
from .errors import CheckpointError, ShapeError
from .layers import (
    STEP_FREQUENCIES,
    ConditionEmbed,
    ConvHead,
    DenseLayer,
    Dropout,
    Layer,
    LstmLayer,
    StepEmbedMLP,
    step_embedding,
)
from .tensor import Context, Tensor, add, as_tensor

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    hidden: int = 128
    seq_len: int = 24
    n_steps: int = 1000
    heads: tuple = DEFAULT_HEADS
    head_dim: int | None = None
    dropout: float = 0.3
    step_dim: int = 64
    cond_layers: int = 2
    seed: int = 0
    step_frequencies: str = "literal"

    def __post_init__(self):
        self.heads = tuple(str(MaskSpec.parse(h)) for h in self.heads)
        if self.step_frequencies not in STEP_FREQUENCIES:
            raise ValueError(f"step_frequencies must be one of {STEP_FREQUENCIES}")
        if self.hidden < 1 or self.seq_len < 1 or self.n_steps < 2:
            raise ValueError("hidden >= 1, seq_len >= 1 and n_steps >= 2 are required")


class DenoiserModel(Layer):
    def __init__(self, config: ModelConfig, ctx: Context | None = None):
        ctx = ctx if ctx is not None else Context(config.seed)
        h = config.hidden
        self.config = config
        self.input_proj = DenseLayer(1, h, ctx)
        self.lstm = LstmLayer(h, h, ctx)
        self.step_mlp = StepEmbedMLP(config.step_dim, h, ctx)
        self.cond_embed = ConditionEmbed(h, config.seq_len, ctx, config.cond_layers)
        self.tmsab = TMSAB(h, ctx, config.heads, config.head_dim)
        self.head = ConvHead(h, ctx)
        self.drop_lstm = Dropout(config.dropout)
        self.drop_attn = Dropout(config.dropout)
        self.dropout_ctx = Context(config.seed).spawn(0xD0)
        self.eval()

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def predict_noise(self, xt, c, t):
        """Noise estimate for ``xt`` (``[N,1]`` or ``[B,N,1]``) at step(s) ``t``."""
        xt = as_tensor(xt)
        c = as_tensor(c)
        n = self.config.seq_len
        single = xt.ndim == 2
        if single:
            xt = xt.reshape(1, n, 1) if xt.shape == (n, 1) else xt
            c = c.reshape(1, n, 1) if c.shape == (n, 1) else c
        if xt.ndim != 3 or xt.shape[1:] != (n, 1):
            raise ShapeError(f"x_t must be [{n}, 1] or [B, {n}, 1], got {list(xt.shape)}")
        if c.shape != xt.shape:
            raise ShapeError(f"condition shape {list(c.shape)} differs from x_t shape {list(xt.shape)}")
        batch = xt.shape[0]
        steps = np.broadcast_to(np.asarray(t), (batch,))
        emb = Tensor(step_embedding(steps, self.config.n_steps, self.config.step_dim, self.config.step_frequencies))

        hidden = self.drop_lstm(self.lstm(self.input_proj(xt)), self.dropout_ctx)
        step = self.step_mlp(emb).reshape(batch, 1, self.config.hidden)
        fused = add(add(hidden, step), self.cond_embed(c))
        attended = self.drop_attn(self.tmsab(fused), self.dropout_ctx)
        out = self.head(attended)
        return out.reshape(n, 1) if single else out


def init_model(config: ModelConfig | None = None, seed: int | None = None) -> DenoiserModel:
    config = config or ModelConfig()
    if seed is not None:
        config.seed = int(seed)
    model = DenoiserModel(config)
    log.info("initialised denoiser with %d parameters", model.parameter_count())
    return model


# -- checkpoint ------------------------------------------------------------------
#
# Little-endian layout:
#   8s   magic  b"LDIFCKPT"
#   u32  format version
#   u32  header length, then that many bytes of UTF-8 JSON
#        {"config": {...}, "metadata": {...}}
#   u32  parameter count P, then P blocks of
#        u16 name length, name (UTF-8), u8 ndim, ndim x u32 extents,
#        prod(extents) x f64 values (row-major)
#   u32  CRC-32 of every preceding byte

MAGIC = b"LDIFCKPT"
VERSION = 1


def save_checkpoint(model: DenoiserModel, path, metadata: dict | None = None):
    header = json.dumps(
        {"config": asdict(model.config), "metadata": metadata or {}}, sort_keys=True
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        parts.append(p.data.astype("<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated or corrupt")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse a checkpoint into ``(config dict, metadata, {name: array})``."""
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return header["config"], header.get("metadata", {}), params


def load_checkpoint(path, expected_seq_len: int | None = None) -> DenoiserModel:
    config_dict, metadata, params = read_checkpoint(path)
    config = ModelConfig(**config_dict)
    if expected_seq_len is not None and config.seq_len != expected_seq_len:
        raise CheckpointError(
            f"{path}: checkpoint sequence length {config.seq_len} disagrees with expected {expected_seq_len}"
        )
    model = DenoiserModel(config)
    named = dict(model.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) ^ set(params))
        raise CheckpointError(f"{path}: parameter names disagree with architecture: {missing[:5]}")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: shape disagreement for {name}: file {params[name].shape}, model {p.shape}"
            )
        p.assign(params[name])
    model.metadata = metadata
    return model
