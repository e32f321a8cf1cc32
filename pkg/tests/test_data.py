import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from temponet.data import (
    CsvSchema,
    DataError,
    SeriesTable,
    SynthConfig,
    WindowSpec,
    apply_normalize,
    downsample,
    fit_normalize,
    ingest_csv,
    make_windows,
    prepare,
    split_train_test,
    synth_gait,
    upsample_linear,
    write_csv,
)


def table(n, n_ch=2, seed=0, period=1.0):
    rng = np.random.default_rng(seed)
    ch = {f"c{i}": rng.normal(size=n) for i in range(n_ch)}
    ch["knee_angle"] = rng.normal(size=n)
    return SeriesTable(np.arange(n) * period, ch)


def write(path, text):
    path.write_text(text)
    return path


# -- ingestion -------------------------------------------------------------

def test_ingest_three_rows(tmp_path):
    p = write(tmp_path / "a.csv", "time_ms,emg,knee_angle\n0,1,10\n1,2,11\n2,3,12\n")
    t = ingest_csv(p)
    assert len(t) == 3 and t.names == ["emg", "knee_angle"] and t.dropped_rows == 0
    np.testing.assert_array_equal(t.channels["knee_angle"], [10, 11, 12])


def test_ingest_drops_nan_rows_and_reports(tmp_path, caplog):
    p = write(tmp_path / "a.csv", "time_ms,emg,knee_angle\n0,1,10\n1,nan,11\n2,3,\n3,4,13\n")
    with caplog.at_level(logging.WARNING):
        t = ingest_csv(p)
    assert len(t) == 2 and t.dropped_rows == 2
    assert "dropped 2" in caplog.text


def test_ingest_forty_feature_schema(tmp_path):
    src = synth_gait(50, seed=1, cfg=SynthConfig(n_emg=12))
    assert len(src.names) == 41
    write_csv(src, tmp_path / "g.csv")
    t = ingest_csv(tmp_path / "g.csv")
    assert t.target == "knee_angle"
    assert len(CsvSchema(include_target=False).input_names(t)) == 40
    assert len(CsvSchema().input_names(t)) == 41
    for name in t.names:
        np.testing.assert_array_equal(t.channels[name], src.channels[name])


@pytest.mark.parametrize("text,match", [
    ("time_ms,emg\n0,1\n", "knee_angle"),
    ("t,knee_angle\n0,1\n", "time column"),
    ("time_ms,knee_angle\n0,1\n0,2\n", "strictly increasing"),
    ("time_ms,knee_angle\n0,1\n1,abc\n", r"a\.csv:3: cannot parse 'abc'"),
    ("time_ms,knee_angle\n0,1\n1\n", r"a\.csv:3: expected 2 cells"),
])
def test_ingest_errors_name_file_and_line(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        ingest_csv(write(tmp_path / "a.csv", text))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        ingest_csv(tmp_path / "nope.csv")


def test_feature_subset_must_exist():
    with pytest.raises(DataError, match="not present"):
        CsvSchema(features=["zzz"]).input_names(table(5))


# -- resampling ------------------------------------------------------------

def test_upsample_linear_ramp():
    t = SeriesTable(np.array([0.0, 5.0]), {"knee_angle": np.array([0.0, 10.0])})
    up = upsample_linear(t, 5, 1)
    np.testing.assert_array_equal(up.time_ms, [0, 1, 2, 3, 4, 5])
    np.testing.assert_allclose(up.channels["knee_angle"], [0, 2, 4, 6, 8, 10])


def test_upsample_constant_channel():
    t = SeriesTable(np.arange(0.0, 50, 5), {"knee_angle": np.full(10, 3.25)})
    assert np.all(upsample_linear(t, 5, 1).channels["knee_angle"] == 3.25)


def test_upsampled_sine_within_interpolation_bound():
    w = 2 * np.pi / 200
    t5 = np.arange(0.0, 2000, 5)
    up = upsample_linear(SeriesTable(t5, {"knee_angle": np.sin(w * t5)}), 5, 1)
    err = np.abs(up.channels["knee_angle"] - np.sin(w * up.time_ms)).max()
    assert err <= w ** 2 * 5 ** 2 / 8 + 1e-12
    assert err > 0.5 * w ** 2 * 5 ** 2 / 8


def test_upsample_rejects_bad_periods():
    with pytest.raises(DataError):
        upsample_linear(table(5, period=5.0), 5, 2)
    with pytest.raises(DataError, match="spaced"):
        upsample_linear(table(5, period=4.0), 5, 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), k=st.integers(1, 7), seed=st.integers(0, 10_000))
def test_upsample_then_downsample_is_identity(n, k, seed):
    t = table(n, seed=seed, period=float(k))
    back = downsample(upsample_linear(t, k, 1), k)
    assert back.time_ms.tobytes() == t.time_ms.tobytes()
    for name in t.names:
        assert back.channels[name].tobytes() == t.channels[name].tobytes()


# -- split and normalisation -----------------------------------------------

def test_split_80_20_and_halves():
    tr, te = split_train_test(table(100), 0.8)
    assert (len(tr), len(te)) == (80, 20)
    assert tr.time_ms.max() < te.time_ms.min()
    tr, te = split_train_test(table(64), 0.5)
    assert len(tr) == len(te) == 32


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 300), ratio=st.floats(0.05, 0.95))
def test_split_is_disjoint_and_complete(n, ratio):
    t = table(n)
    try:
        tr, te = split_train_test(t, ratio)
    except DataError:
        return
    np.testing.assert_array_equal(np.concatenate([tr.time_ms, te.time_ms]), t.time_ms)


def test_split_errors():
    with pytest.raises(DataError):
        split_train_test(table(10), 1.0)
    with pytest.raises(DataError):
        split_train_test(table(10), 0.8, min_length=5)


def test_normalise_population_formula():
    t = SeriesTable(np.arange(3.0), {"knee_angle": np.array([1.0, 2.0, 3.0])})
    stats = fit_normalize(t)
    assert stats.mean[0] == 2.0 and stats.std[0] == pytest.approx(np.sqrt(2 / 3))
    np.testing.assert_allclose(apply_normalize(t, stats).channels["knee_angle"], [-1.2247, 0, 1.2247], atol=1e-4)


def test_normalised_train_is_standard():
    t = table(500, n_ch=4)
    n = apply_normalize(t, fit_normalize(t))
    for col in n.channels.values():
        assert abs(col.mean()) < 1e-9 and abs(col.std() - 1) < 1e-9


def test_zero_variance_channel_dropped_with_warning(caplog):
    t = SeriesTable(np.arange(4.0), {"flat": np.ones(4), "knee_angle": np.arange(4.0)})
    with caplog.at_level(logging.WARNING):
        stats = fit_normalize(t)
    assert stats.names == ["knee_angle"] and stats.dropped == ["flat"] and "flat" in caplog.text
    with pytest.raises(DataError):
        fit_normalize(t, strict=True)
    with pytest.raises(DataError):
        fit_normalize(SeriesTable(np.arange(3.0), {"knee_angle": np.ones(3)}))


def test_prepare_uses_train_only_statistics():
    t = synth_gait(3000, seed=2)
    data = prepare(t, WindowSpec(64, 5, 32))
    train, _ = split_train_test(t, 0.8)
    ref = fit_normalize(train)
    np.testing.assert_array_equal(data.stats.mean, ref.mean)
    np.testing.assert_array_equal(data.stats.std, ref.std)
    leaky = fit_normalize(t)
    assert np.abs(leaky.mean - data.stats.mean).max() > 1e-6


def test_prepare_holds_out_tail_of_train_for_validation():
    t = synth_gait(3000, seed=2)
    data = prepare(t, WindowSpec(64, 5, 32))
    assert data.train.time_ms[-1] < data.val.time_ms[0]
    assert len(data.val.time_ms) == 240
    assert data.val.time_ms[-1] < data.test.time_ms[0]


# -- windows ---------------------------------------------------------------

def test_window_count():
    assert len(make_windows(table(10), WindowSpec(4, 2, 2))) == 5
    assert len(make_windows(table(6), WindowSpec(4, 2, 2))) == 1
    assert len(make_windows(table(20), WindowSpec(4, 2, 2, stride=3))) == 5
    with pytest.raises(DataError, match="shorter"):
        make_windows(table(5), WindowSpec(4, 2, 2))


@pytest.mark.parametrize("n,L,H", [(50, 8, 3), (500, 128, 1), (500, 128, 20)])
def test_window_alignment_exhaustive(n, L, H):
    t = table(n, n_ch=2, seed=n + L)
    ws = make_windows(t, WindowSpec(L, H, L // 2))
    raw = t.matrix(ws.input_names)
    target = t.channels["knee_angle"]
    for i in range(len(ws)):
        b = ws[i]
        np.testing.assert_array_equal(b.enc_in[0], raw[i:i + L])
        np.testing.assert_array_equal(b.target[0, :, 0], target[i + L:i + L + H])
        np.testing.assert_array_equal(b.dec_in[0, :L // 2], raw[i + L - L // 2:i + L])
        assert np.all(b.dec_in[0, L // 2:] == 0.0)


def test_batch_equals_stacked_items():
    ws = make_windows(table(40), WindowSpec(6, 2, 3))
    b = ws.batch([3, 0, 7])
    for k, i in enumerate([3, 0, 7]):
        np.testing.assert_array_equal(b.enc_in[k], ws[i].enc_in[0])


def test_windowspec_validation():
    with pytest.raises(DataError):
        WindowSpec(4, 0, 2)
    with pytest.raises(DataError):
        WindowSpec(4, 1, 5)


def test_marks_follow_time():
    ws = make_windows(table(30), WindowSpec(6, 2, 3), with_marks=True)
    b = ws[4]
    assert b.enc_marks.shape == (1, 6, 3) and b.dec_marks.shape == (1, 5, 3)
    assert np.all(np.abs(b.enc_marks) <= 0.5)


# -- synthetic generator ---------------------------------------------------

def test_synth_is_deterministic():
    a, b = synth_gait(800, seed=3), synth_gait(800, seed=3)
    for name in a.names:
        assert a.channels[name].tobytes() == b.channels[name].tobytes()
    assert len(a.names) == 40


def test_synth_target_within_range():
    lo, hi = SynthConfig().target_range
    k = synth_gait(5000, seed=7).channels["knee_angle"]
    assert lo <= k.min() and k.max() <= hi


def test_synth_autocorrelation_peaks_at_period():
    k = synth_gait(8000, seed=7).channels["knee_angle"]
    x = k - k.mean()
    lags = np.arange(500, 1500)
    ac = np.array([np.dot(x[:-lag], x[lag:]) / (len(x) - lag) for lag in lags])
    assert abs(lags[ac.argmax()] - SynthConfig().period) <= 2


def test_table_invariants():
    with pytest.raises(DataError):
        SeriesTable(np.arange(3.0), {"knee_angle": np.ones(2)})
    with pytest.raises(DataError):
        SeriesTable(np.arange(3.0), {"x": np.ones(3)})
    t = table(4)
    with pytest.raises(ValueError):
        t.channels["c0"][0] = 1.0
