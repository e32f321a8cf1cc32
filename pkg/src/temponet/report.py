"""Metric tables, relative improvement, SVG figures and inference timing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from html import escape
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ForecastBatch
from .nn import Module, param_count
from .tensor import no_grad

# Published knee-angle MAE (degrees) per prediction length, used to audit the
# improvement arithmetic.  The 200 ms row exists only for two models.
REFERENCE_MAE = {
    "TempoNet": {1: 0.442, 20: 0.670, 40: 0.815, 60: 1.037, 80: 1.276, 100: 1.327, 200: 2.515},
    "Autoformer": {1: 1.548, 20: 1.800, 40: 2.121, 60: 2.717, 80: 2.820, 100: 3.789},
    "Informer": {1: 0.608, 20: 0.821, 40: 0.990, 60: 1.678, 80: 2.068, 100: 2.407},
    "Transformer": {1: 0.288, 20: 0.705, 40: 0.819, 60: 1.114, 80: 1.347, 100: 1.463, 200: 2.861},
    "LSTM": {1: 0.045, 20: 0.967, 40: 1.339, 60: 1.472, 80: 1.870, 100: 2.019},
    "DLinear": {1: 0.225, 20: 3.144, 40: 5.997, 60: 8.360, 80: 10.688, 100: 12.973},
    "NLinear": {1: 0.147, 20: 2.438, 40: 4.722, 60: 6.749, 80: 8.772, 100: 10.917},
}


def relative_improvement(mae_other: float, mae_ref: float) -> float:
    """Percent by which ``mae_other`` exceeds the reference: ``100 (other - ref) / ref``."""
    if mae_ref == 0:
        return math.inf if mae_other > 0 else 0.0
    return 100.0 * (mae_other - mae_ref) / mae_ref


@dataclass
class Cell:
    model: str
    horizon: int
    mae: float = math.nan
    mse: float = math.nan
    params: int = 0
    train_seconds: float = math.nan
    infer_mean_ms: float = math.nan
    infer_std_ms: float = math.nan
    status: str = "ok"
    reason: str = ""


@dataclass
class MetricsReport:
    """Per-(model, horizon) metrics; insertion order fixes row/column order."""

    cells: dict = field(default_factory=dict)
    per_window: dict = field(default_factory=dict)

    def add(self, cell: Cell, per_window_mae: Optional[np.ndarray] = None) -> None:
        self.cells[(cell.model, cell.horizon)] = cell
        if per_window_mae is not None:
            self.per_window[(cell.model, cell.horizon)] = np.asarray(per_window_mae)

    def fail(self, model: str, horizon: int, reason: str) -> None:
        self.cells[(model, horizon)] = Cell(model, horizon, status="failed", reason=reason)

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.cells))

    @property
    def horizons(self) -> list[int]:
        return sorted({h for _, h in self.cells})

    def mae_matrix(self) -> np.ndarray:
        """Rows are horizons, columns models; failed or missing cells are NaN."""
        out = np.full((len(self.horizons), len(self.models)), np.nan)
        for i, h in enumerate(self.horizons):
            for j, m in enumerate(self.models):
                cell = self.cells.get((m, h))
                if cell is not None and cell.status == "ok":
                    out[i, j] = cell.mae
        return out

    def improvement(self, reference: str) -> tuple[list[str], np.ndarray]:
        others = [m for m in self.models if m != reference]
        mat = self.mae_matrix()
        ref = mat[:, self.models.index(reference)]
        cols = [self.models.index(m) for m in others]
        with np.errstate(divide="ignore", invalid="ignore"):
            imp = 100.0 * (mat[:, cols] - ref[:, None]) / ref[:, None]
        return others, imp


def _fmt(x: float) -> str:
    return "failed" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_metrics_csv(report: MetricsReport, path) -> None:
    """MAE table: one row per prediction length, one column per model."""
    mat = report.mae_matrix()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pred_len", *report.models])
        for i, h in enumerate(report.horizons):
            w.writerow([h, *(_fmt(v) for v in mat[i])])


def read_metrics_csv(path) -> MetricsReport:
    report = MetricsReport()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    models = rows[0][1:]
    for row in rows[1:]:
        h = int(row[0])
        for m, v in zip(models, row[1:]):
            if v == "failed":
                report.fail(m, h, "")
            else:
                report.add(Cell(m, h, mae=float(v)))
    return report


_CELL_FIELDS = [f.name for f in fields(Cell)]


def write_cells_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CELL_FIELDS)
        for cell in report.cells.values():
            row = asdict(cell)
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def read_cells_csv(path) -> MetricsReport:
    report = MetricsReport()
    types = {f.name: f.type for f in fields(Cell)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
            report.add(Cell(**kw))
    return report


def write_improvement_csv(report: MetricsReport, path, reference: str) -> None:
    others, imp = report.improvement(reference)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pred_len", *(f"{m}_vs_{reference}_pct" for m in others)])
        for i, h in enumerate(report.horizons):
            w.writerow([h, *(_fmt(v) for v in imp[i])])


def read_improvement_csv(path) -> tuple[list[str], list[int], np.ndarray]:
    """Inverse of :func:`write_improvement_csv`: (column headers, horizons, percent matrix)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    mat = np.array([[math.nan if v == "failed" else float(v) for v in r[1:]] for r in rows[1:]])
    return rows[0][1:], [int(r[0]) for r in rows[1:]], mat.reshape(len(rows) - 1, len(rows[0]) - 1)


def reference_report(models: Optional[Sequence[str]] = None) -> MetricsReport:
    report = MetricsReport()
    for m in models or REFERENCE_MAE:
        for h, v in REFERENCE_MAE[m].items():
            report.add(Cell(m, h, mae=v))
    return report


# -- SVG -------------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


class _Canvas:
    def __init__(self, width=720, height=360, margin=(60, 20, 30, 50)):
        self.w, self.h = width, height
        self.left, self.right, self.top, self.bottom = margin
        self.parts: list[str] = []

    def frame(self, x0, x1, y0, y1):
        if x1 == x0:
            x1 = x0 + 1
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def sx(self, x):
        return self.left + (x - self.x0) / (self.x1 - self.x0) * (self.w - self.left - self.right)

    def sy(self, y):
        return self.h - self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.h - self.top - self.bottom)

    def axes(self, title, xlabel, ylabel, n_ticks=5):
        l, b = self.left, self.h - self.bottom
        p = self.parts
        p.append(f'<line x1="{l}" y1="{b}" x2="{self.w - self.right}" y2="{b}" stroke="black"/>')
        p.append(f'<line x1="{l}" y1="{self.top}" x2="{l}" y2="{b}" stroke="black"/>')
        for v in np.linspace(self.y0, self.y1, n_ticks):
            y = self.sy(v)
            p.append(f'<text x="{l - 6}" y="{y + 4:.1f}" font-size="10" text-anchor="end">{v:.3g}</text>')
        p.append(f'<text x="{self.w / 2}" y="14" font-size="13" text-anchor="middle">{escape(title)}</text>')
        p.append(f'<text x="{self.w / 2}" y="{self.h - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
        p.append(f'<text x="14" y="{self.h / 2}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 14 {self.h / 2})">{escape(ylabel)}</text>')

    def polyline(self, xs, ys, color, dash=None, label=None, idx=0):
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')
        if label:
            y = self.top + 14 * (idx + 1)
            x = self.w - self.right - 150
            self.parts.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 20}" y2="{y - 4}" stroke="{color}"{extra}/>')
            self.parts.append(f'<text x="{x + 26}" y="{y}" font-size="11">{escape(label)}</text>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n<rect width="100%" height="100%" fill="white"/>\n'
                f"{body}\n</svg>\n")


def forecast_svg(history: np.ndarray, truth: np.ndarray, preds: dict, title: str = "") -> str:
    """Observed lookback, true future and one or more forecasts on a shared time axis."""
    L, H = len(history), len(truth)
    values = [history, truth, *preds.values()]
    lo = min(float(np.min(v)) for v in values)
    hi = max(float(np.max(v)) for v in values)
    c = _Canvas()
    c.frame(-L, H, lo, hi)
    c.axes(title or f"{H}-step forecast", "time step (0 = forecast origin)", "target")
    c.polyline(np.arange(-L, 0), history, "#555555", label="observed", idx=0)
    c.polyline(np.arange(0, H), truth, "black", label="true", idx=1)
    for i, (name, p) in enumerate(preds.items()):
        c.polyline(np.arange(0, H), p, _PALETTE[i % len(_PALETTE)], dash="5,3", label=name, idx=i + 2)
    return c.render()


def box_stats(values: np.ndarray) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {"q1": q1, "median": med, "q3": q3, "lo": inside.min(), "hi": inside.max(), "mean": v.mean()}


def box_svg(groups: dict, title: str = "MAE distribution", ylabel: str = "MAE") -> str:
    """One box per group (whiskers at 1.5 IQR, diamond at the mean)."""
    stats = {k: box_stats(v) for k, v in groups.items()}
    lo = min(s["lo"] for s in stats.values())
    hi = max(s["hi"] for s in stats.values())
    c = _Canvas()
    c.frame(0, len(stats), lo, hi)
    c.axes(title, "model", ylabel)
    for i, (name, s) in enumerate(stats.items()):
        cx = c.sx(i + 0.5)
        half = 0.3 * (c.sx(1) - c.sx(0))
        col = _PALETTE[i % len(_PALETTE)]
        c.parts.append(f'<line x1="{cx}" y1="{c.sy(s["lo"]):.2f}" x2="{cx}" y2="{c.sy(s["hi"]):.2f}" stroke="{col}"/>')
        c.parts.append(f'<rect x="{cx - half:.2f}" y="{c.sy(s["q3"]):.2f}" width="{2 * half:.2f}" '
                       f'height="{max(c.sy(s["q1"]) - c.sy(s["q3"]), 0.5):.2f}" fill="{col}" fill-opacity="0.3" stroke="{col}"/>')
        c.parts.append(f'<line x1="{cx - half:.2f}" y1="{c.sy(s["median"]):.2f}" x2="{cx + half:.2f}" '
                       f'y2="{c.sy(s["median"]):.2f}" stroke="black" stroke-width="2"/>')
        my = c.sy(s["mean"])
        c.parts.append(f'<path d="M{cx} {my - 4:.2f} L{cx + 4} {my:.2f} L{cx} {my + 4:.2f} L{cx - 4} {my:.2f} Z" fill="black"/>')
        c.parts.append(f'<text x="{cx}" y="{c.h - c.bottom + 14}" font-size="11" text-anchor="middle">{escape(name)}</text>')
    return c.render()


# -- timing ----------------------------------------------------------------

@dataclass
class BenchResult:
    model: str
    params: int
    warmup: int
    repeats: int
    mean_s: float
    std_s: float


def benchmark(model: Module, batch: ForecastBatch, warmup: int = 100, repeats: int = 1000,
              name: str = "") -> BenchResult:
    """Untimed warm-up passes, then per-pass wall time over ``repeats`` forward calls."""
    if repeats < 1 or warmup < 0:
        raise ValueError(f"need repeats >= 1 and warmup >= 0, got {repeats}, {warmup}")
    model.eval()
    times = np.empty(repeats)
    with no_grad():
        for _ in range(warmup):
            model(batch)
        for i in range(repeats):
            t0 = time.perf_counter()
            model(batch)
            times[i] = time.perf_counter() - t0
    return BenchResult(name, param_count(model), warmup, repeats, float(times.mean()), float(times.std()))


def write_bench_csv(results: Sequence[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(BenchResult)])
        for r in results:
            w.writerow([r.model, r.params, r.warmup, r.repeats, repr(r.mean_s), repr(r.std_s)])


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
