"""TempoNet encoder-decoder, the comparison baselines, and checkpoint I/O."""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    ACTIVATIONS,
    MASK_MODES,
    SCALE_MODES,
    FeedForward,
    MultiHeadAttention,
    TemporalAttention,
    make_causal_mask,
)
from .nn import LayerNorm, Linear, Module, param_count
from .tensor import Tensor

EMBEDDING_MODES = ("value+positional", "value+temporal", "value+positional+temporal")
MODEL_KINDS = ("temponet", "vanilla_transformer", "dlinear", "nlinear", "persistence")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 512
    h: int = 8
    d_ff: int = 2048
    n_enc: int = 4
    n_dec: int = 3
    n_temporal_blocks: int = 3
    in_channels: int = 40
    out_channels: int = 1
    lookback: int = 128
    horizon: int = 1
    label_len: int = 64
    embedding_mode: str = "value+positional"
    n_marks: int = 3
    dropout: float = 0.05
    activation: str = "relu"
    scale_mode: str = "conventional"
    mask_mode: str = "pre_softmax_additive"
    target_index: Optional[int] = None
    moving_avg: int = 25

    def __post_init__(self):
        if self.d % self.h:
            raise ValueError(f"d={self.d} must be divisible by h={self.h}")
        if self.horizon < 1 or self.lookback < 1:
            raise ValueError("lookback and horizon must be >= 1")
        if not 0 <= self.label_len <= self.lookback:
            raise ValueError(f"label_len {self.label_len} must lie in [0, lookback={self.lookback}]")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ValueError(f"unknown embedding_mode {self.embedding_mode!r}")
        if self.scale_mode not in SCALE_MODES or self.mask_mode not in MASK_MODES:
            raise ValueError("unknown scale/mask mode")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.n_enc, self.n_dec, self.n_temporal_blocks) < 0:
            raise ValueError("layer counts must be non-negative")

    @classmethod
    def vanilla(cls, **overrides) -> "ModelConfig":
        """Transformer baseline defaults: 2 encoders, 1 decoder, no temporal blocks."""
        base = dict(n_enc=2, n_dec=1, n_temporal_blocks=0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ForecastBatch:
    """Encoder input, warm-started decoder input and target, all normalised."""

    enc_in: np.ndarray
    dec_in: np.ndarray
    target: np.ndarray
    enc_marks: Optional[np.ndarray] = None
    dec_marks: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.enc_in.shape[0]


# -- embedding -------------------------------------------------------------

@lru_cache(maxsize=32)
def _sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d // 2])
    table.flags.writeable = False
    return table


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin, odd columns cos."""
    return _sinusoid(length, d)


class DataEmbedding(Module):
    """Per-position linear value projection plus positional and/or tick terms."""

    def __init__(self, in_channels: int, d: int, mode: str, rng: np.random.Generator,
                 n_marks: int = 3, dropout: float = 0.0):
        if mode not in EMBEDDING_MODES:
            raise ValueError(f"unknown embedding mode {mode!r}")
        self.mode = mode
        self.value = Linear(in_channels, d, rng)
        self.temporal = Linear(n_marks, d, rng) if "temporal" in mode else None
        self.dropout = dropout

    def forward(self, x, marks: Optional[np.ndarray] = None) -> Tensor:
        x = T._lift(x)
        if x.shape[-1] != self.value.weight.shape[0]:
            raise T.ShapeError(f"embedding expects {self.value.weight.shape[0]} channels, got {x.shape}")
        out = self.value(x)
        if "positional" in self.mode:
            out = out + positional_encoding(x.shape[1], out.shape[-1])
        if self.temporal is not None and marks is not None:
            out = out + self.temporal(Tensor(marks))
        return T.dropout(out, self.dropout, self._rng, self.training)


def embed(x, embedding: DataEmbedding, marks: Optional[np.ndarray] = None) -> Tensor:
    return embedding(x, marks)


# -- encoder / decoder -----------------------------------------------------

class EncoderLayer(Module):
    """Self-attention, ``n_temporal`` temporal attention blocks, FFN; post-norm residuals."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, n_temporal: Optional[int] = None):
        n_temporal = cfg.n_temporal_blocks if n_temporal is None else n_temporal
        self.attn = MultiHeadAttention(cfg.d, cfg.h, rng, cfg.scale_mode, cfg.mask_mode)
        self.norm_attn = LayerNorm(cfg.d)
        self.temporal = [TemporalAttention(cfg.d, rng) for _ in range(n_temporal)]
        self.norm_temporal = [LayerNorm(cfg.d) for _ in range(n_temporal)]
        self.ffn = FeedForward(cfg.d, cfg.d_ff, rng, cfg.activation)
        self.norm_ffn = LayerNorm(cfg.d)
        self.dropout = cfg.dropout

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self._rng, self.training)

    def forward(self, x: Tensor, skip_temporal: bool = False) -> Tensor:
        x = self.norm_attn(x + self._drop(self.attn(x, x)))
        if not skip_temporal:
            for block, norm in zip(self.temporal, self.norm_temporal):
                x = norm(x + self._drop(block(x)))
        return self.norm_ffn(x + self._drop(self.ffn(x)))


class DecoderLayer(Module):
    """Causal self-attention, cross-attention over encoder memory, FFN."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d, cfg.h, rng, cfg.scale_mode, cfg.mask_mode)
        self.norm_self = LayerNorm(cfg.d)
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.h, rng, cfg.scale_mode, cfg.mask_mode)
        self.norm_cross = LayerNorm(cfg.d)
        self.ffn = FeedForward(cfg.d, cfg.d_ff, rng, cfg.activation)
        self.norm_ffn = LayerNorm(cfg.d)
        self.dropout = cfg.dropout

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self._rng, self.training)

    def forward(self, y: Tensor, memory: Tensor) -> Tensor:
        mask = make_causal_mask(y.shape[1])
        y = self.norm_self(y + self._drop(self.self_attn(y, y, mask)))
        y = self.norm_cross(y + self._drop(self.cross_attn(y, memory)))
        return self.norm_ffn(y + self._drop(self.ffn(y)))


def encoder_forward(x: Tensor, layers: Sequence[EncoderLayer], skip_temporal: bool = False) -> Tensor:
    for layer in layers:
        x = layer(x, skip_temporal)
    return x


def decoder_forward(y: Tensor, memory: Tensor, layers: Sequence[DecoderLayer]) -> Tensor:
    for layer in layers:
        y = layer(y, memory)
    return y


class TempoNet(Module):
    """Encoder-decoder forecaster; ``n_temporal_blocks=0`` gives the vanilla Transformer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.enc_embedding = DataEmbedding(cfg.in_channels, cfg.d, cfg.embedding_mode, rng,
                                           cfg.n_marks, cfg.dropout)
        self.dec_embedding = DataEmbedding(cfg.in_channels, cfg.d, cfg.embedding_mode, rng,
                                           cfg.n_marks, cfg.dropout)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_enc)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_dec)]
        self.projection = Linear(cfg.d, cfg.out_channels, rng)
        self.set_rng(np.random.default_rng(seed + 1))

    def encode(self, batch: ForecastBatch, skip_temporal: bool = False) -> Tensor:
        x = self.enc_embedding(batch.enc_in, batch.enc_marks)
        return encoder_forward(x, self.encoder, skip_temporal)

    def forward(self, batch: ForecastBatch) -> Tensor:
        cfg = self.cfg
        _check_batch(batch, cfg)
        memory = self.encode(batch)
        y = self.dec_embedding(batch.dec_in, batch.dec_marks)
        y = decoder_forward(y, memory, self.decoder)
        out = self.projection(y)
        return out[:, -cfg.horizon:, :]


def temponet_forward(batch: ForecastBatch, model: TempoNet) -> Tensor:
    return model(batch)


def _check_batch(batch: ForecastBatch, cfg: ModelConfig) -> None:
    b, lb, c = batch.enc_in.shape
    if c != cfg.in_channels:
        raise T.ShapeError(f"batch has {c} channels, model expects {cfg.in_channels}")
    if batch.dec_in.shape[1] < cfg.horizon:
        raise T.ShapeError(f"decoder input length {batch.dec_in.shape[1]} < horizon {cfg.horizon}")
    if batch.dec_in.shape[0] != b or batch.dec_in.shape[2] != c:
        raise T.ShapeError(f"decoder input {batch.dec_in.shape} inconsistent with encoder input {batch.enc_in.shape}")


# -- baselines -------------------------------------------------------------

def series_decomp(x: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``x[..., L]`` into (remainder, trend) using an edge-padded moving average."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"moving-average kernel must be a positive odd integer, got {kernel}")
    pad = (kernel - 1) // 2
    padded = np.concatenate(
        [np.repeat(x[..., :1], pad, axis=-1), x, np.repeat(x[..., -1:], pad, axis=-1)], axis=-1)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1)
    trend = windows.mean(axis=-1)
    return x - trend, trend


def _target_history(batch: ForecastBatch, cfg: ModelConfig) -> np.ndarray:
    if cfg.target_index is None:
        raise ValueError("this baseline needs the target channel among the inputs (target_index)")
    return batch.enc_in[:, :, cfg.target_index]


class DLinear(Module):
    """Moving-average trend/remainder split, one shared L->H linear map per component."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seasonal = Linear(cfg.lookback, cfg.horizon, rng)
        self.trend = Linear(cfg.lookback, cfg.horizon, rng)

    def forward(self, batch: ForecastBatch) -> Tensor:
        remainder, trend = series_decomp(_target_history(batch, self.cfg), self.cfg.moving_avg)
        out = self.seasonal(Tensor(remainder)) + self.trend(Tensor(trend))
        return out.reshape(out.shape[0], self.cfg.horizon, 1)


class NLinear(Module):
    """Subtract the last observed value, map L->H linearly, add it back."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.linear = Linear(cfg.lookback, cfg.horizon, rng)

    def forward(self, batch: ForecastBatch) -> Tensor:
        x = _target_history(batch, self.cfg)
        last = x[:, -1:]
        out = self.linear(Tensor(x - last)) + last
        return out.reshape(out.shape[0], self.cfg.horizon, 1)


class Persistence(Module):
    """Repeat the last observed target value across the horizon."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg

    def forward(self, batch: ForecastBatch) -> Tensor:
        last = _target_history(batch, self.cfg)[:, -1]
        return Tensor(np.repeat(last[:, None, None], self.cfg.horizon, axis=1))


def build_model(kind: str, cfg: ModelConfig, seed: int = 0) -> Module:
    if kind == "temponet":
        return TempoNet(cfg, seed)
    if kind == "vanilla_transformer":
        return TempoNet(replace(cfg, n_temporal_blocks=0), seed)
    if kind == "dlinear":
        return DLinear(cfg, seed)
    if kind == "nlinear":
        return NLinear(cfg, seed)
    if kind == "persistence":
        return Persistence(cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def baseline_forward(kind: str, batch: ForecastBatch, model: Module) -> Tensor:
    if kind not in MODEL_KINDS or kind == "temponet":
        raise ValueError(f"unknown baseline kind {kind!r}")
    return model(batch)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, kind: str, cfg: ModelConfig, state: dict[str, np.ndarray],
                    extra: Optional[dict] = None) -> Path:
    """Write config plus named float64 tensors to an ``.npz`` container.

    Entries carry a fixed timestamp so identical inputs give identical bytes.
    """
    path = Path(path)
    meta = {"version": CHECKPOINT_VERSION, "kind": kind, "config": cfg.to_dict(), "extra": extra or {}}
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update((f"param:{k}", np.asarray(v, dtype=np.float64)) for k, v in state.items())
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)
    return path


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    state: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def build(self, seed: int = 0) -> Module:
        model = build_model(self.kind, self.config, seed)
        model.load_state_dict(self.state)
        return model


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param:"):]: npz[k].copy() for k in npz.files if k.startswith("param:")}
    return Checkpoint(meta["kind"], ModelConfig.from_dict(meta["config"]), state, meta.get("extra", {}))


__all__ = [
    "ModelConfig", "ForecastBatch", "DataEmbedding", "EncoderLayer", "DecoderLayer", "TempoNet",
    "DLinear", "NLinear", "Persistence", "build_model", "baseline_forward", "series_decomp",
    "positional_encoding", "embed", "encoder_forward", "decoder_forward", "temponet_forward",
    "param_count", "save_checkpoint", "load_checkpoint", "Checkpoint", "MODEL_KINDS",
]
