"""TempoNet: attention-based multi-horizon forecasting on a NumPy autodiff core."""

from .attention import FeedForward, MultiHeadAttention, TemporalAttention, make_causal_mask
from .data import (
    CsvSchema,
    DataError,
    NormStats,
    SeriesTable,
    SynthConfig,
    WindowSet,
    WindowSpec,
    ingest_csv,
    make_windows,
    prepare,
    synth_gait,
)
from .gradcheck import GradCheckReport, grad_check
from .model import MODEL_KINDS, ForecastBatch, ModelConfig, TempoNet, build_model, load_checkpoint, save_checkpoint
from .nn import Module, param_count
from .tensor import ContractError, NumericError, ShapeError, Tensor, no_grad
from .training import TrainConfig, evaluate, train, train_repeated

__all__ = [
    "ContractError", "CsvSchema", "DataError", "FeedForward", "ForecastBatch", "GradCheckReport",
    "MODEL_KINDS", "ModelConfig", "Module", "MultiHeadAttention", "NormStats", "NumericError",
    "SeriesTable", "ShapeError", "SynthConfig", "TempoNet", "TemporalAttention", "Tensor",
    "TrainConfig", "WindowSet", "WindowSpec", "build_model", "evaluate", "grad_check", "ingest_csv",
    "load_checkpoint", "make_causal_mask", "make_windows", "no_grad", "param_count", "prepare",
    "save_checkpoint", "synth_gait", "train", "train_repeated",
]
