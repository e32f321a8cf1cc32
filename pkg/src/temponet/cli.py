"""Command-line entry point: ``temponet train|eval|gradcheck|bench|report``.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CsvSchema, DataError, SeriesTable, WindowSpec, ingest_csv, prepare, synth_gait, upsample_linear
from .model import MODEL_KINDS, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .nn import param_count
from .report import (
    REFERENCE_MAE,
    Cell,
    MetricsReport,
    benchmark,
    box_svg,
    forecast_svg,
    read_metrics_csv,
    reference_report,
    write_bench_csv,
    write_cells_csv,
    write_improvement_csv,
    write_metrics_csv,
    write_text,
)
from .tensor import NumericError
from .training import TrainConfig, evaluate, predict, train_repeated, write_history

log = logging.getLogger("temponet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_HORIZONS = (1, 20, 40, 60, 80, 100)
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_horizons(text) -> list[int]:
    values = text if isinstance(text, (list, tuple)) else [v for v in str(text).split(",") if v.strip()]
    try:
        hs = sorted({int(v) for v in values})
    except ValueError:
        raise UsageError(f"horizons must be integers, got {text!r}") from None
    if not hs or hs[0] < 1:
        raise UsageError("horizons must be positive")
    return hs


@dataclass
class RunSpec:
    """Everything needed to reproduce a train/eval sweep."""

    models: list = field(default_factory=lambda: ["temponet"])
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: str = "synth"
    synth_steps: int = 20000
    data_seed: int = 7
    target: str = "knee_angle"
    features: Optional[list] = None
    include_target: bool = True
    upsample: Optional[list] = None
    horizons: list = field(default_factory=lambda: list(DEFAULT_HORIZONS))
    split: float = 0.8
    train_stride: Optional[int] = None
    out: str = "runs/latest"

    def __post_init__(self):
        self.horizons = parse_horizons(self.horizons)
        for m in self.models:
            if m not in MODEL_KINDS:
                raise UsageError(f"unknown model {m!r}; choose from {', '.join(MODEL_KINDS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = d.get("spec", d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ------------------------------------------------------------------

def load_table(spec: RunSpec) -> SeriesTable:
    if spec.data == "synth":
        table = synth_gait(spec.synth_steps, spec.data_seed)
    else:
        table = ingest_csv(spec.data, CsvSchema(target=spec.target))
    if spec.upsample:
        table = upsample_linear(table, *spec.upsample)
    return table


def schema_of(spec: RunSpec) -> CsvSchema:
    return CsvSchema(target=spec.target, features=spec.features, include_target=spec.include_target)


def model_config(spec: RunSpec, kind: str, horizon: int, n_inputs: int, target_index) -> ModelConfig:
    """Kind-specific defaults (the Transformer baseline has 2 enc / 1 dec), then spec overrides."""
    base = ModelConfig.vanilla() if kind == "vanilla_transformer" else ModelConfig()
    merged = {**base.to_dict(), **spec.model}
    merged.update(horizon=horizon, in_channels=n_inputs, target_index=target_index)
    return ModelConfig.from_dict(merged)


def _window_spec(spec: RunSpec, horizon: int) -> WindowSpec:
    lookback = spec.model.get("lookback", ModelConfig.lookback)
    label_len = spec.model.get("label_len", min(ModelConfig.label_len, lookback))
    return WindowSpec(lookback, horizon, label_len)


def _prepare(spec: RunSpec, table: SeriesTable, horizon: int):
    tcfg = TrainConfig.from_dict(spec.train)
    with_marks = "temporal" in spec.model.get("embedding_mode", ModelConfig.embedding_mode)
    return prepare(table, _window_spec(spec, horizon), schema_of(spec), spec.split,
                   tcfg.val_fraction, spec.train_stride, with_marks)


# -- subcommands -----------------------------------------------------------

def cmd_train(spec: RunSpec) -> dict:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(spec)
    tcfg = TrainConfig.from_dict(spec.train)
    runs = []
    for h in spec.horizons:
        data = _prepare(spec, table, h)
        for kind in spec.models:
            cfg = model_config(spec, kind, h, len(data.input_names), data.target_index)
            t0 = time.perf_counter()
            model, best, _ = train_repeated(lambda s: build_model(kind, cfg, s), data.train, data.val, tcfg)
            seconds = time.perf_counter() - t0
            ckpt = out / f"ckpt_{kind}_h{h}.npz"
            hist = out / f"history_{kind}_h{h}.csv"
            save_checkpoint(ckpt, kind, cfg, model.state_dict(),
                            {"seed": best.seed, "best_epoch": best.best_epoch, "stats": data.stats.to_dict()})
            write_history(best.history, hist)
            runs.append({"model": kind, "horizon": h, "checkpoint": ckpt.name, "history": hist.name,
                         "params": param_count(model), "train_seconds": seconds,
                         "best_epoch": best.best_epoch, "best_val_mae": best.best_val, "seed": best.seed,
                         "model_config": cfg.to_dict()})
            log.info("trained %s h=%d in %.1fs (best epoch %d)", kind, h, seconds, best.best_epoch)
    manifest = {"spec": spec.to_dict(), "config": {"train": tcfg.to_dict()}, "runs": runs}
    write_text(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def cmd_eval(out_dir, reference: str = "temponet", window: int = 0,
             bench_warmup: int = 0, bench_repeats: int = 0) -> MetricsReport:
    out = Path(out_dir)
    manifest_path = out / MANIFEST
    if not manifest_path.exists():
        raise DataError(f"no {MANIFEST} in {out}")
    manifest = json.loads(manifest_path.read_text())
    spec = RunSpec.from_dict(manifest["spec"])
    table = load_table(spec)
    report = MetricsReport()
    by_h: dict[int, list] = {}
    for run in manifest["runs"]:
        by_h.setdefault(run["horizon"], []).append(run)

    for h in sorted(by_h):
        data = _prepare(spec, table, h)
        idx = min(window, len(data.test) - 1)
        preds = {}
        for run in by_h[h]:
            kind = run["model"]
            try:
                ckpt = load_checkpoint(out / run["checkpoint"])
                if ckpt.config.in_channels != len(data.input_names):
                    raise DataError(f"checkpoint expects {ckpt.config.in_channels} inputs, "
                                    f"data provides {len(data.input_names)}")
                model = ckpt.build()
                res = evaluate(model, data.test, data.stats)
            except (DataError, KeyError, ValueError) as exc:
                report.fail(kind, h, str(exc))
                continue
            cell = Cell(kind, h, res.mae, res.mse, param_count(model), run.get("train_seconds", float("nan")))
            if bench_repeats:
                b = benchmark(model, data.test.batch([idx]), bench_warmup, bench_repeats, kind)
                cell.infer_mean_ms, cell.infer_std_ms = b.mean_s * 1e3, b.std_s * 1e3
            report.add(cell, res.per_window_mae)
            preds[kind] = data.stats.denormalize(predict(model, data.test, idx=np.array([idx]))[0, :, 0],
                                                 data.test.target_name)
        if preds:
            raw = lambda v: data.stats.denormalize(v, data.test.target_name)
            s = data.test.starts[idx]
            L = data.test.spec.lookback
            hist = raw(data.test.target_series[s:s + L])
            truth = raw(data.test.target_series[s + L:s + L + h])
            write_text(out / f"forecast_{h}.svg", forecast_svg(hist, truth, preds, f"{h}-step forecast, test window {idx}"))

    write_metrics_csv(report, out / "metrics.csv")
    write_cells_csv(report, out / "metrics_long.csv")
    if reference in report.models:
        write_improvement_csv(report, out / "improvement.csv", reference)
    groups = {}
    for (m, _), v in report.per_window.items():
        groups.setdefault(m, []).append(v)
    if groups:
        write_text(out / "mae_box.svg", box_svg({m: np.concatenate(v) for m, v in groups.items()},
                                                 "Per-window MAE across horizons", "MAE (target units)"))
    return report


def cmd_gradcheck(component: Optional[str], tol: float, step: float) -> bool:
    from .checks import COMPONENTS, run_component
    names = [component] if component else list(COMPONENTS)
    ok = True
    for name in names:
        rep = run_component(name, step)
        passed = rep.worst <= tol
        ok &= passed
        print(f"{name:32s} max_rel_err={rep.worst:.3e} {'PASS' if passed else 'FAIL'}")
    return ok


def cmd_bench(spec: RunSpec, warmup: int, repeats: int, checkpoint: Optional[str]) -> list:
    results = []
    h = spec.horizons[0]
    table = load_table(spec)
    data = _prepare(spec, table, h)
    batch = data.test.batch([0])
    if checkpoint:
        ck = load_checkpoint(checkpoint)
        targets = [(ck.kind, ck.build())]
    else:
        targets = [(k, build_model(k, model_config(spec, k, h, len(data.input_names), data.target_index)))
                   for k in spec.models]
    for kind, model in targets:
        r = benchmark(model, batch, warmup, repeats, kind)
        results.append(r)
        print(f"{kind:22s} params={r.params:>10d} infer={r.mean_s * 1e3:.3f} +/- {r.std_s * 1e3:.3f} ms "
              f"(warmup={r.warmup}, repeats={r.repeats})")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(results, out / "bench.csv")
    return results


def cmd_report(out_dir, metrics: Optional[str], reference: str, use_reference_table: bool) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if use_reference_table:
        report = reference_report()
    else:
        path = Path(metrics) if metrics else out / "metrics.csv"
        if not path.exists():
            raise DataError(f"metrics file not found: {path}")
        report = read_metrics_csv(path)
    if reference not in report.models:
        raise UsageError(f"reference model {reference!r} not in {report.models}")
    write_metrics_csv(report, out / "metrics.csv")
    write_improvement_csv(report, out / "improvement.csv", reference)
    others, imp = report.improvement(reference)
    print("pred_len," + ",".join(f"{m} vs {reference} (%)" for m in others))
    for i, h in enumerate(report.horizons):
        print(f"{h}," + ",".join("" if np.isnan(v) else f"{v:.1f}" for v in imp[i]))
    return report


# -- argument parsing ------------------------------------------------------

_MODEL_FLAGS = {
    "d": ("d", int), "h": ("h", int), "d_ff": ("d_ff", int), "enc": ("n_enc", int), "dec": ("n_dec", int),
    "temporal_blocks": ("n_temporal_blocks", int), "lookback": ("lookback", int),
    "label_len": ("label_len", int), "dropout": ("dropout", float), "embedding": ("embedding_mode", str),
    "scale_mode": ("scale_mode", str), "mask_mode": ("mask_mode", str), "activation": ("activation", str),
}
_TRAIN_FLAGS = {
    "lr": ("learning_rate", float), "batch_size": ("batch_size", int), "epochs": ("max_epochs", int),
    "patience": ("patience", int), "seed": ("seed", int), "repetitions": ("repetitions", int),
    "loss": ("loss", str), "val_fraction": ("val_fraction", float), "clip_norm": ("clip_norm", float),
    "max_steps": ("max_steps", int),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run spec or a manifest.json from an earlier run")
    p.add_argument("--data", help="'synth' or a CSV path with a time_ms column")
    p.add_argument("--synth-steps", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--target")
    p.add_argument("--features", help="comma-separated input channel names")
    p.add_argument("--exclude-target", action="store_true", help="do not feed the target channel as an input")
    p.add_argument("--upsample", nargs=2, type=float, metavar=("FROM_MS", "TO_MS"))
    p.add_argument("--model", action="append", choices=MODEL_KINDS, dest="models")
    p.add_argument("--horizons", help="comma-separated prediction lengths (default 1,20,40,60,80,100)")
    p.add_argument("--split", type=float)
    p.add_argument("--train-stride", type=int)
    p.add_argument("--out")
    for flag, (_, typ) in {**_MODEL_FLAGS, **_TRAIN_FLAGS}.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)


def spec_from_args(args) -> RunSpec:
    base = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        base = json.loads(path.read_text())
        base = dict(base.get("spec", base))
    for key in ("data", "synth_steps", "data_seed", "target", "split", "train_stride", "out", "models", "upsample"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if args.features:
        base["features"] = [f.strip() for f in args.features.split(",") if f.strip()]
    if args.exclude_target:
        base["include_target"] = False
    if args.horizons:
        base["horizons"] = parse_horizons(args.horizons)
    model = dict(base.get("model", {}))
    train = dict(base.get("train", {}))
    for flag, (name, _) in _MODEL_FLAGS.items():
        if getattr(args, flag) is not None:
            model[name] = getattr(args, flag)
    for flag, (name, _) in _TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            train[name] = getattr(args, flag)
    base["model"], base["train"] = model, train
    spec = RunSpec.from_dict(base)
    ModelConfig.from_dict({**ModelConfig().to_dict(), **model})
    TrainConfig.from_dict(train)
    if spec.data != "synth" and not Path(spec.data).exists():
        raise DataError(f"data file not found: {spec.data}")
    return spec


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="temponet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train models over a horizon sweep")
    _add_run_flags(t)

    e = sub.add_parser("eval", help="evaluate checkpoints listed in OUT/manifest.json")
    e.add_argument("--out", required=True)
    e.add_argument("--reference", default="temponet")
    e.add_argument("--window", type=int, default=0, help="test window plotted in forecast_<h>.svg")
    e.add_argument("--bench-warmup", type=int, default=0)
    e.add_argument("--bench-repeats", type=int, default=0)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and the micro model")
    from .checks import COMPONENTS
    g.add_argument("--component", choices=list(COMPONENTS))
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--step", type=float, default=1e-5)

    b = sub.add_parser("bench", help="time single-window inference")
    _add_run_flags(b)
    b.add_argument("--checkpoint")
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--repeats", type=int, default=1000)

    r = sub.add_parser("report", help="rebuild improvement tables from a metrics CSV")
    r.add_argument("--out", required=True)
    r.add_argument("--metrics")
    r.add_argument("--reference", default="temponet")
    r.add_argument("--reference-table", action="store_true",
                   help=f"use the built-in published MAE table ({', '.join(REFERENCE_MAE)})")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cmd_train(spec_from_args(args))
        elif args.command == "eval":
            cmd_eval(args.out, args.reference, args.window, args.bench_warmup, args.bench_repeats)
        elif args.command == "gradcheck":
            if not cmd_gradcheck(args.component, args.tol, args.step):
                return EXIT_NUMERIC
        elif args.command == "bench":
            spec = spec_from_args(args)
            cmd_bench(spec, args.warmup, args.repeats, args.checkpoint)
        elif args.command == "report":
            cmd_report(args.out, args.metrics, args.reference, args.reference_table)
    except UsageError as exc:
        print(f"temponet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"temponet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"temponet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"temponet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
