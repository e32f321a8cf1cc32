"""Gradient-check fixtures for each layer type and the micro TempoNet."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import FeedForward, MultiHeadAttention, TemporalAttention, make_causal_mask
from .gradcheck import GradCheckReport, grad_check
from .model import ForecastBatch, ModelConfig, TempoNet
from .nn import LayerNorm
from .tensor import Tensor

# Entries whose gradient is below this are compared in absolute terms.
GRAD_FLOOR = 1e-6


def micro_config(**overrides) -> ModelConfig:
    base = dict(d=8, h=2, d_ff=16, n_enc=1, n_dec=1, in_channels=3, out_channels=1,
                lookback=6, horizon=2, label_len=3, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def micro_batch(cfg: ModelConfig, rng: np.random.Generator, batch: int = 2) -> ForecastBatch:
    enc = rng.normal(size=(batch, cfg.lookback, cfg.in_channels))
    dec = np.concatenate([enc[:, -cfg.label_len:], np.zeros((batch, cfg.horizon, cfg.in_channels))], axis=1)
    target = rng.normal(size=(batch, cfg.horizon, cfg.out_channels))
    return ForecastBatch(enc, dec, target)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # A fixed random projection keeps every output entry in the loss, so
    # symmetric cancellations (e.g. softmax rows summing to one) cannot hide errors.
    weights = rng.normal(size=out.shape)
    return lambda y: (y * weights).sum()


def _check(build: Callable[[], Tensor], leaves, names, step: float) -> GradCheckReport:
    rng = np.random.default_rng(99)
    proj = _projected(build(), rng)
    return grad_check(lambda: proj(build()), leaves, step=step, names=names, floor=GRAD_FLOOR)


def check_matmul(step: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    return _check(lambda: a @ b, [a, b], ["a", "b"], step)


def check_softmax(step: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    return _check(lambda: T.softmax_lastdim(x), [x], ["x"], step)


def check_layer_norm(step: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    ln = LayerNorm(6)
    ln.gain.data = rng.normal(size=6)
    ln.bias.data = rng.normal(size=6)
    return _check(lambda: ln(x), [x, ln.gain, ln.bias], ["x", "gain", "bias"], step)


def check_ffn(step: float = 1e-5, activation: str = "relu") -> GradCheckReport:
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    ffn = FeedForward(6, 12, rng, activation)
    leaves = [x] + ffn.parameters()
    names = ["x"] + [n for n, _ in ffn.named_parameters()]
    return _check(lambda: ffn(x), leaves, names, step)


def check_mha(scale_mode: str, mask_mode: str, step: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(4)
    q = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    kv = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    mha = MultiHeadAttention(8, 2, rng, scale_mode, mask_mode)
    mask = make_causal_mask(5)
    leaves = [q, kv] + mha.parameters()
    names = ["q_in", "kv_in"] + [n for n, _ in mha.named_parameters()]
    return _check(lambda: mha(q, kv, mask), leaves, names, step)


def check_temporal_attention(step: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
    ta = TemporalAttention(6, rng)
    leaves = [x] + ta.parameters()
    names = ["x"] + [n for n, _ in ta.named_parameters()]
    return _check(lambda: ta(x), leaves, names, step)


def check_temponet(step: float = 1e-5) -> GradCheckReport:
    cfg = micro_config()
    model = TempoNet(cfg, seed=6)
    model.eval()
    batch = micro_batch(cfg, np.random.default_rng(6))
    named = list(model.named_parameters())
    return _check(lambda: model(batch), [p for _, p in named], [n for n, _ in named], step)


COMPONENTS: dict[str, Callable[[float], GradCheckReport]] = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "layer_norm": check_layer_norm,
    "ffn": check_ffn,
    "ffn_gelu": lambda step: check_ffn(step, "gelu"),
    "mha_conventional_additive": lambda step: check_mha("conventional", "pre_softmax_additive", step),
    "mha_conventional_multiplicative": lambda step: check_mha("conventional", "post_softmax_multiplicative", step),
    "mha_literal_additive": lambda step: check_mha("paper_literal", "pre_softmax_additive", step),
    "mha_literal_multiplicative": lambda step: check_mha("paper_literal", "post_softmax_multiplicative", step),
    "temporal_attention": check_temporal_attention,
    "temponet": check_temponet,
}


def run_component(name: str, step: float = 1e-5) -> GradCheckReport:
    if name not in COMPONENTS:
        raise KeyError(f"unknown component {name!r}; choose from {', '.join(COMPONENTS)}")
    return COMPONENTS[name](step)
