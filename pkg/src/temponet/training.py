"""Adam, the epoch loop with early stopping, and denormalised evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import NormStats, WindowSet
from .nn import Module
from .tensor import NumericError, Tensor, no_grad

log = logging.getLogger(__name__)

LOSSES = ("mse", "mae")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    repetitions: int = 10
    loss: str = "mse"
    val_fraction: float = 0.1
    clip_norm: Optional[float] = None
    max_steps: Optional[int] = None
    eval_batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.repetitions < 1:
            raise ValueError("batch_size, patience and repetitions must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class DivergenceError(NumericError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              names: Optional[Sequence[str]] = None) -> None:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise T.ShapeError("parameter, gradient and state lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise T.ShapeError(f"gradient {g.shape} / state {state.m[i].shape} do not match parameter {p.shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient in parameter {label} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-4):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.names)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params)))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / (total + 1e-12)
    return total


# -- losses and evaluation -------------------------------------------------

def loss_fn(pred: Tensor, target: np.ndarray, kind: str = "mse") -> Tensor:
    diff = pred - target
    return (diff * diff).mean() if kind == "mse" else diff.abs().mean()


def predict(model: Module, windows: WindowSet, batch_size: int = 128,
            idx: Optional[np.ndarray] = None) -> np.ndarray:
    """Normalised predictions ``[N, H, out]`` in eval mode without graph recording."""
    model.eval()
    out = []
    with no_grad():
        for batch in windows.iter_batches(batch_size, idx):
            out.append(model(batch).data)
    return np.concatenate(out, axis=0)


def _targets(windows: WindowSet, idx=None) -> np.ndarray:
    idx = np.arange(len(windows)) if idx is None else idx
    L, H = windows.spec.lookback, windows.spec.horizon
    rows = windows.starts[idx][:, None] + L + np.arange(H)
    return windows.target_series[rows][:, :, None]


@dataclass
class EvalResult:
    """Errors in denormalised (degree) units."""

    mae: float
    mse: float
    per_step_mae: np.ndarray
    per_step_mse: np.ndarray
    per_window_mae: np.ndarray
    n_windows: int


def metrics_from_arrays(pred: np.ndarray, target: np.ndarray) -> EvalResult:
    if pred.size == 0:
        raise ValueError("no windows to evaluate")
    err = pred - target
    abs_err = np.abs(err)
    sq = err * err
    return EvalResult(
        mae=float(abs_err.mean()),
        mse=float(sq.mean()),
        per_step_mae=abs_err.mean(axis=(0, 2)),
        per_step_mse=sq.mean(axis=(0, 2)),
        per_window_mae=abs_err.mean(axis=(1, 2)),
        n_windows=pred.shape[0],
    )


def evaluate(model: Module, windows: WindowSet, denorm: NormStats, batch_size: int = 128) -> EvalResult:
    """MAE/MSE over all windows after mapping predictions and targets back to raw units."""
    if len(windows) == 0:
        raise ValueError("empty window set")
    name = windows.target_name
    pred = denorm.denormalize(predict(model, windows, batch_size), name)
    target = denorm.denormalize(_targets(windows), name)
    return metrics_from_arrays(pred, target)


def _val_losses(model: Module, windows: WindowSet, cfg: TrainConfig) -> tuple[float, float]:
    pred = predict(model, windows, cfg.eval_batch_size)
    err = pred - _targets(windows)
    loss = float((err * err).mean()) if cfg.loss == "mse" else float(np.abs(err).mean())
    return loss, float(np.abs(err).mean())


# -- loop ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    wall_ms: float
    steps: int


@dataclass
class TrainResult:
    best_state: dict
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    steps: int = 0
    seed: int = 0
    train_seconds: float = 0.0


def train(model: Module, train_windows: WindowSet, val_windows: WindowSet, cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Mini-batch Adam with per-epoch shuffling and early stopping on validation MAE.

    The model is left holding the best parameters seen.  Models without
    learnable parameters are evaluated once and returned unchanged.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("need at least one training and one validation window")
    rng = np.random.default_rng(cfg.seed)
    model.set_rng(np.random.default_rng([cfg.seed, 1]))
    named = list(model.named_parameters())
    params = [p for _, p in named]
    result = TrainResult(best_state=model.state_dict(), seed=cfg.seed)
    t_start = time.perf_counter()

    if not params:
        val_loss, val_mae = _val_losses(model, val_windows, cfg)
        result.history.append(EpochRecord(1, float("nan"), val_loss, val_mae, 0.0, 0))
        result.best_epoch, result.best_val = 1, val_mae
        return result

    opt = Adam(named, cfg.learning_rate)
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_windows))
        losses = []
        for batch in train_windows.iter_batches(cfg.batch_size, order):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            try:
                loss = loss_fn(model(batch), batch.target, cfg.loss)
            except NumericError as exc:
                raise DivergenceError(str(exc), epoch, result.steps + 1) from exc
            model.zero_grad()
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            try:
                opt.step()
            except NumericError as exc:
                raise DivergenceError(str(exc), epoch, result.steps + 1) from exc
            result.steps += 1
            losses.append(loss.item())
        if not losses:
            break
        val_loss, val_mae = _val_losses(model, val_windows, cfg)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_mae,
                          (time.perf_counter() - t0) * 1000.0, result.steps)
        result.history.append(rec)
        log.info("epoch %d train %.6f val %.6f val_mae %.6f", epoch, rec.train_loss, val_loss, val_mae)
        if on_epoch:
            on_epoch(rec)
        if val_mae < result.best_val:
            result.best_val, result.best_epoch = val_mae, epoch
            result.best_state = model.state_dict()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break

    model.load_state_dict(result.best_state)
    result.train_seconds = time.perf_counter() - t_start
    return result


def train_repeated(build: Callable[[int], Module], train_windows: WindowSet, val_windows: WindowSet,
                   cfg: TrainConfig) -> tuple[Module, TrainResult, list[TrainResult]]:
    """Train ``cfg.repetitions`` fresh models (seeds ``seed, seed+1, ...``); keep the best."""
    runs = []
    best = None
    for r in range(cfg.repetitions):
        seed = cfg.seed + r
        model = build(seed)
        res = train(model, train_windows, val_windows, _with_seed(cfg, seed))
        runs.append(res)
        if best is None or res.best_val < best[1].best_val:
            best = (model, res)
    return best[0], best[1], runs


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return TrainConfig(**d)


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_mae", "wall_ms", "steps")


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.val_mae),
                        repr(rec.wall_ms), rec.steps])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                        float(r["val_mae"]), float(r["wall_ms"]), int(r["steps"])) for r in rows]
