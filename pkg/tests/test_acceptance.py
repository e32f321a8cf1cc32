"""Acceptance criteria, one test per criterion; each records a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed in the terminal summary section.
"""

import logging
import time

import numpy as np
import pytest

from temponet import tensor as T
from temponet.attention import MultiHeadAttention, TemporalAttention, make_causal_mask, multi_head_attention
from temponet.checks import COMPONENTS, run_component
from temponet.data import (
    SeriesTable,
    WindowSpec,
    apply_normalize,
    downsample,
    fit_normalize,
    make_windows,
    prepare,
    split_train_test,
    synth_gait,
    upsample_linear,
)
from temponet.model import ModelConfig, build_model, save_checkpoint
from temponet.nn import param_count
from temponet.report import REFERENCE_MAE, Cell, MetricsReport
from temponet.tensor import Tensor, no_grad
from temponet.training import TrainConfig, evaluate, predict, train

from conftest import ACCEPTANCE_LINES
import oracles as O

log = logging.getLogger("acceptance")


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1. gradient correctness ------------------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst = {name: run_component(name).worst for name in COMPONENTS}
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 60
    record(1, ok, f"{len(worst)} components, worst {name} max_rel_err={err:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# -- 2. attention invariants --------------------------------------------------

def test_criterion_2_attention_invariants():
    rng = np.random.default_rng(2024)
    row_err = 0.0
    causal_err = {}
    for mode in ("pre_softmax_additive", "post_softmax_multiplicative"):
        worst = 0.0
        for case in range(20):
            mha = MultiHeadAttention(8, 2, rng, rng.choice(["conventional", "paper_literal"]), mode)
            x = rng.normal(size=(2, 7, 8)) * rng.uniform(0.5, 4)
            mask = make_causal_mask(7)
            out, w = multi_head_attention(Tensor(x), Tensor(x), mha, mask, return_weights=True)
            row_err = max(row_err, float(np.abs(w.data.sum(-1) - 1).max()))
            j = int(rng.integers(0, 7))
            y = x.copy()
            y[:, j] += rng.normal(size=(2, 8)) * 5
            out2 = mha(Tensor(y), Tensor(y), mask)
            worst = max(worst, float(np.abs(out.data[:, :j] - out2.data[:, :j]).max(initial=0.0)))
        causal_err[mode] = worst
    plain = T.softmax_lastdim(Tensor(rng.normal(size=(50, 9)) * 30)).data
    row_err = max(row_err, float(np.abs(plain.sum(-1) - 1).max()))

    temporal_err = 0.0
    for case in range(100):
        d = int(rng.integers(2, 9))
        ta = TemporalAttention(d, rng)
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 8)), d))
        ref = O.temporal(x, ta.wt_q.data, ta.wt_k.data, ta.wt_v.data)
        temporal_err = max(temporal_err, float(np.abs(ta(Tensor(x)).data - ref).max()))

    ok = row_err <= 1e-9 and max(causal_err.values()) <= 1e-9 and temporal_err <= 1e-10
    record(2, ok, f"row-sum err {row_err:.1e}, causal leak additive {causal_err['pre_softmax_additive']:.1e} "
                  f"multiplicative {causal_err['post_softmax_multiplicative']:.1e} (<= 1e-9), "
                  f"temporal oracle err {temporal_err:.1e} over 100 cases (<= 1e-10)")


# -- 3. parameter count -------------------------------------------------------

def test_criterion_3_parameter_count():
    vanilla = param_count(build_model("vanilla_transformer", ModelConfig.vanilla()))
    tempo = param_count(build_model("temponet", ModelConfig()))
    rel = (vanilla - 10.66e6) / 10.66e6
    log.info("TempoNet parameters at defaults: %d (published ~71.59M)", tempo)
    record(3, abs(rel) <= 0.05, f"vanilla Transformer {vanilla:,} vs ~10.66M ({100 * rel:+.2f}%, tol 5%); "
                                f"TempoNet {tempo:,} logged vs ~71.59M (no tolerance)")


# -- 4. pipeline integrity ---------------------------------------------------

def test_criterion_4_pipeline_integrity():
    raw = synth_gait(500, seed=11)
    aligned = True
    n_windows = 0
    for H in (1, 20):
        ws = make_windows(raw, WindowSpec(128, H, 64))
        mat = raw.matrix(ws.input_names)
        tgt = raw.channels[raw.target]
        for i in range(len(ws)):
            b = ws[i]
            aligned &= np.array_equal(b.enc_in[0], mat[i:i + 128])
            aligned &= np.array_equal(b.target[0, :, 0], tgt[i + 128:i + 128 + H])
            aligned &= np.array_equal(b.dec_in[0, :64], mat[i + 64:i + 128]) and not b.dec_in[0, 64:].any()
        aligned &= len(ws) == 500 - 128 - H + 1
        n_windows += len(ws)

    table = synth_gait(4000, seed=12)
    data = prepare(table, WindowSpec(128, 20, 64))
    train_part, _ = split_train_test(table, 0.8)
    train_only = fit_normalize(train_part)
    everything = fit_normalize(table)
    no_leak = (np.array_equal(data.stats.mean, train_only.mean) and np.array_equal(data.stats.std, train_only.std)
               and not np.allclose(data.stats.mean, everything.mean))
    test_rows = data.test.target_series
    expected = (table.channels[table.target][3200:] - train_only.mean[-1]) / train_only.std[-1]
    no_leak &= np.array_equal(test_rows, expected)

    coarse = synth_gait(400, seed=13)
    coarse = SeriesTable(coarse.time_ms * 5, dict(coarse.channels))
    back = downsample(upsample_linear(coarse, 5, 1), 5)
    identity = back.time_ms.tobytes() == coarse.time_ms.tobytes() and all(
        back.channels[k].tobytes() == v.tobytes() for k, v in coarse.channels.items())

    ok = aligned and no_leak and identity
    record(4, ok, f"alignment over {n_windows} windows (L=128, H=1,20): {aligned}; "
                  f"train-only normalisation: {no_leak}; upsample->downsample bitwise identity: {identity}")


# -- 5 and 8. learning capability and determinism ----------------------------

OVERFIT_CFG = dict(d=32, h=4, d_ff=64, n_enc=1, n_dec=1, lookback=32, horizon=8, label_len=16, dropout=0.0)
OVERFIT_TRAIN = dict(learning_rate=1e-3, batch_size=32, max_epochs=10 ** 6, patience=10 ** 6, max_steps=500,
                     repetitions=1, seed=0)


def overfit_run(tmp_path, tag):
    table = synth_gait(4000, seed=5)
    normed = apply_normalize(table, fit_normalize(table))
    windows = make_windows(normed, WindowSpec(32, 8, 16, stride=50)).subset(np.arange(64))
    cfg = ModelConfig(in_channels=len(windows.input_names), target_index=windows.target_index, **OVERFIT_CFG)
    model = build_model("temponet", cfg, seed=0)
    t0 = time.perf_counter()
    res = train(model, windows, windows, TrainConfig(**OVERFIT_TRAIN))
    elapsed = time.perf_counter() - t0
    pred = predict(model, windows)
    mse = float(((pred - windows.batch(np.arange(64)).target) ** 2).mean())
    ckpt = save_checkpoint(tmp_path / f"overfit_{tag}.npz", "temponet", cfg, model.state_dict())
    return res, mse, elapsed, ckpt


@pytest.fixture(scope="module")
def overfit_first(tmp_path_factory):
    return overfit_run(tmp_path_factory.mktemp("c5"), "a")


def test_criterion_5_learning_capability(overfit_first):
    res, mse, elapsed, _ = overfit_first
    ok = res.steps <= 500 and mse < 1e-2 and elapsed < 300
    record(5, ok, f"micro TempoNet on 64 windows: train MSE {mse:.2e} (< 1e-2) after {res.steps} steps "
                  f"(<= 500) at lr 1e-3, {elapsed:.1f}s (< 300s)")


def test_criterion_8_determinism(overfit_first, tmp_path):
    res_a, _, _, ckpt_a = overfit_first
    res_b, _, _, ckpt_b = overfit_run(tmp_path, "b")
    # wall_ms is a clock reading, not a training result
    strip = lambda h: [(r.epoch, r.train_loss, r.val_loss, r.val_mae, r.steps) for r in h]
    same_history = strip(res_a.history) == strip(res_b.history)
    same_ckpt = ckpt_a.read_bytes() == ckpt_b.read_bytes()
    record(8, same_history and same_ckpt,
           f"two seeded overfit runs: histories identical ({len(res_a.history)} epochs, wall_ms excluded): "
           f"{same_history}; checkpoint files byte-identical: {same_ckpt}")


# -- 6. forecasting ordering at desk scale -----------------------------------

# Scaled configuration for a single CPU core (see the decisions ledger).
DESK_MODEL = dict(d=64, h=4, d_ff=256, n_enc=2, n_dec=1, n_temporal_blocks=3, lookback=128, horizon=20,
                  label_len=32, dropout=0.05)
DESK_TRAIN = dict(learning_rate=1e-4, batch_size=32, max_epochs=10, patience=3, repetitions=1, seed=0)
DESK_TRAIN_STRIDE = 4
# Calibrated once from the reference run: TempoNet 1.0814 deg vs persistence 1.0977 deg (ratio 0.9851).
DESK_RATIO_THRESHOLD = 0.99


def test_criterion_6_forecasting_ordering():
    t0 = time.perf_counter()
    table = synth_gait(20000, seed=7)
    data = prepare(table, WindowSpec(128, 20, DESK_MODEL["label_len"]), split_ratio=0.8,
                   train_stride=DESK_TRAIN_STRIDE)
    cfg = ModelConfig(in_channels=len(data.input_names), target_index=data.target_index, **DESK_MODEL)
    persistence = evaluate(build_model("persistence", cfg), data.test, data.stats).mae
    model = build_model("temponet", cfg, seed=0)
    res = train(model, data.train, data.val, TrainConfig(**DESK_TRAIN))
    tempo = evaluate(model, data.test, data.stats).mae
    elapsed = time.perf_counter() - t0
    ratio = tempo / persistence
    ok = tempo < persistence and ratio <= DESK_RATIO_THRESHOLD and elapsed < 1800
    record(6, ok, f"synth_gait H=20 test MAE: TempoNet {tempo:.4f} vs persistence {persistence:.4f} deg "
                  f"(ratio {ratio:.4f} <= frozen {DESK_RATIO_THRESHOLD}), best epoch {res.best_epoch}, "
                  f"{elapsed / 60:.1f} min (< 30 min)")


# -- 7. report-formula audit ---------------------------------------------------

def test_criterion_7_report_formula_audit():
    report = MetricsReport()
    for model in ("TempoNet", "Transformer", "DLinear"):
        for h, v in REFERENCE_MAE[model].items():
            report.add(Cell(model, h, mae=v))
    others, imp = report.improvement("TempoNet")
    row = {h: i for i, h in enumerate(report.horizons)}
    transformer_100 = imp[row[100], others.index("Transformer")]
    dlinear_100 = imp[row[100], others.index("DLinear")]
    transformer_200 = imp[row[200], others.index("Transformer")]
    checks = [(transformer_100, 10.2), (dlinear_100, 877.6), (transformer_200, 13.8)]
    ok = all(abs(got - want) <= 1.0 for got, want in checks) and round(transformer_200) == 14
    record(7, ok, f"Transformer vs TempoNet @100: {transformer_100:.2f}% (10.2); DLinear @100: {dlinear_100:.2f}% "
                  f"(~877); Transformer @200: {transformer_200:.2f}% (~13.8, quoted 14); tol 1 pp")
