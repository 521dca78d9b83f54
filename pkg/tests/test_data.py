import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tsguide.data import (
    DataError,
    Series,
    WindowSampler,
    build_lag_matrix,
    default_lags,
    last_window,
    load_jsonl,
    make_missing_mask,
    mean_scale,
    save_jsonl,
    slice_random_window,
    synth_generate,
)
from tsguide.errors import ParameterError


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_jsonl(tmp_path):
    f = write_lines(tmp_path / "a.jsonl", [
        json.dumps({"start": "2020-01-01", "freq": "H", "target": [1, 2, 3]}),
        json.dumps({"start": "2020-01-02", "freq": "H", "target": [4, 5], "item_id": "b"}),
    ])
    ds = load_jsonl(f)
    assert len(ds) == 2
    np.testing.assert_array_equal(ds.series[0].values, [1, 2, 3])
    assert ds.series[1].item_id == "b" and ds.series[0].item_id == "a:1"
    empty = write_lines(tmp_path / "empty.jsonl", [])
    assert len(load_jsonl(empty)) == 0
    # directory input reads every file in name order
    assert len(load_jsonl(tmp_path)) == 2
    out = tmp_path / "out"
    out.mkdir()
    save_jsonl(ds, out / "copy.jsonl")
    again = load_jsonl(out / "copy.jsonl")
    assert [s.item_id for s in again] == ["a:1", "b"]
    np.testing.assert_array_equal(again.series[1].values, [4, 5])


@pytest.mark.parametrize(
    "line, message",
    [
        ('{"start": "x", "freq": "H", "target": [1, "a"]}', "line 2|:2:"),
        ('{"start": "x", "freq": "H", "target": [1, NaN]}', ":2:"),
        ('{"start": "x", "freq": "W", "target": [1]}', "freq"),
        ('{"freq": "H", "target": [1]}', "start"),
        ("not json", "invalid JSON"),
    ],
)
def test_load_jsonl_errors(tmp_path, line, message):
    f = write_lines(tmp_path / "bad.jsonl", ['{"start": "x", "freq": "H", "target": [1]}', line])
    with pytest.raises(DataError, match=message):
        load_jsonl(f)


def test_mean_scale():
    w = mean_scale([2.0, -4.0, 6.0])
    assert w.scale == 4.0
    np.testing.assert_array_equal(w.values, [0.5, -1.0, 1.5])
    z = mean_scale(np.zeros(4))
    assert z.scale == 1.0
    np.testing.assert_array_equal(z.values, 0.0)
    part = mean_scale([1.0, 3.0, 100.0], observed=[True, True, False])
    assert part.scale == 2.0
    with pytest.raises(ParameterError):
        mean_scale([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6).filter(lambda v: v == 0 or abs(v) > 1e-200), min_size=1, max_size=30))
def test_mean_scale_round_trip(values):
    w = mean_scale(values)
    assert w.scale > 0
    # one division and one multiplication: at most one unit in the last place
    np.testing.assert_array_max_ulp(w.inverse(), np.array(values), maxulp=1)


def test_slice_random_window():
    s = Series("s", "2020", "H", np.arange(10.0))
    rng = np.random.default_rng(0)
    w = slice_random_window(s, 10, rng)
    assert w.origin == ("s", 0)
    a = [slice_random_window(s, 4, np.random.default_rng(5)).origin for _ in range(2)]
    assert a[0] == a[1]
    with pytest.raises(DataError):
        slice_random_window(s, 11, rng)
    counts = np.bincount([slice_random_window(s, 4, rng).origin[1] for _ in range(10_000)], minlength=7)
    assert stats.chisquare(counts).pvalue > 0.001
    ctx = slice_random_window(Series("c", "2020", "H", np.array([1.0, 3.0, 50.0])), 3, rng, context_length=2)
    assert ctx.scale == 2.0


def test_build_lag_matrix():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert build_lag_matrix(v, 2, 2).shape == (2, 1)
    np.testing.assert_array_equal(build_lag_matrix(v, 2, 2, [1]), [[3, 2], [4, 3]])
    sine = np.sin(2 * np.pi * np.arange(200) / 24)
    m = build_lag_matrix(sine, 50, 96, [24, 48])
    np.testing.assert_allclose(m[:, 1], m[:, 0], atol=1e-12)
    np.testing.assert_allclose(m[:, 2], m[:, 0], atol=1e-12)
    with pytest.raises(DataError, match="lag 48"):
        build_lag_matrix(sine, 30, 96, [24, 48])
    with pytest.raises(DataError):
        build_lag_matrix(v, 3, 2)


def test_default_lags():
    assert default_lags("H") == (24, 48, 168)
    assert default_lags("H", 100) == (24, 48)
    assert default_lags("D") == (7, 14)


def test_missing_masks():
    m = make_missing_mask("bm-e", 0.5, 8, 2)
    np.testing.assert_array_equal(np.flatnonzero(~m), [4, 5, 6, 7, 8, 9])
    b = make_missing_mask("BM-B", 0.5, 8, 2)
    np.testing.assert_array_equal(np.flatnonzero(~b), [0, 1, 2, 3, 8, 9])
    np.testing.assert_array_equal(make_missing_mask("rm", 0.0, 8, 2, np.random.default_rng(0)), make_missing_mask("none", 0.5, 8, 2))
    r1 = make_missing_mask("rm", 0.5, 8, 2, np.random.default_rng(3))
    r2 = make_missing_mask("rm", 0.5, 8, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(r1, r2)
    assert (~r1[:8]).sum() == 4 and not r1[8:].any()
    assert make_missing_mask("bm-b", 0.3, 7, 1).sum() == 7 - 2
    for bad in (("xx", 0.5), ("rm", 1.5)):
        with pytest.raises(ParameterError):
            make_missing_mask(bad[0], bad[1], 8, 2, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["none", "rm", "bm-b", "bm-e"]), st.floats(0, 1), st.integers(1, 50), st.integers(0, 20), st.integers(0, 99))
def test_mask_partition(scenario, ratio, ctx, horizon, seed):
    m = make_missing_mask(scenario, ratio, ctx, horizon, np.random.default_rng(seed))
    assert m.shape == (ctx + horizon,)
    assert not m[ctx:].any()
    assert (~m[:ctx]).sum() == (0 if scenario == "none" else int(np.floor(ratio * ctx)))


def test_synth_generate():
    a = synth_generate("sine-mixture", {"periods": (24,), "noise_std": 0.0}, 3, 200, seed=1)
    b = synth_generate("sine-mixture", {"periods": (24,), "noise_std": 0.0}, 3, 200, seed=1)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.values, t.values)
    v = a.series[0].values
    np.testing.assert_allclose(v[24:], v[:-24], atol=1e-12)
    ar = synth_generate("ar1", {"phi": 0.0, "noise_std": 1.0}, 1, 10_000, seed=2).series[0].values
    assert abs(np.corrcoef(ar[:-1], ar[1:])[0, 1]) < 0.05
    ar9 = synth_generate("ar1", {"phi": 0.9, "noise_std": 1.0}, 1, 10_000, seed=2).series[0].values
    assert np.corrcoef(ar9[:-1], ar9[1:])[0, 1] == pytest.approx(0.9, abs=0.03)
    sn = synth_generate("seasonal-noise", {"period": 12, "noise_std": 0.0, "level": 1.0}, 2, 48, seed=3)
    np.testing.assert_array_equal(sn.series[0].values, sn.series[1].values)
    np.testing.assert_array_equal(sn.series[0].values[12:], sn.series[0].values[:-12])
    for bad in (("bogus", {}), ("ar1", {"phi": 1.0}), ("sine-mixture", {"periods": (1, 2), "amplitudes": (1,)})):
        with pytest.raises(ParameterError):
            synth_generate(bad[0], bad[1], 1, 10, seed=0)


def test_window_sampler(caplog):
    ds = synth_generate("sine-mixture", {"level": 3.0}, 4, 300, seed=0)
    ds.series.append(Series("short", "2020", "H", np.ones(50)))
    sampler = WindowSampler(ds, 96, context_length=72, lags=(24,))
    assert "short" in caplog.text and len(sampler.series) == 4
    windows, ids = sampler.sample(np.random.default_rng(0), 16)
    assert windows.shape == (16, 96, 2)
    for w, (item, offset) in zip(windows, ids):
        raw = build_lag_matrix(next(s for s in ds if s.item_id == item).values, offset, 96, (24,))
        scale = np.mean(np.abs(raw[:72, 0]))
        np.testing.assert_allclose(w * scale, raw, rtol=1e-12)
        assert offset >= 24
    again, _ = sampler.sample(np.random.default_rng(0), 16)
    np.testing.assert_array_equal(windows, again)
    assert np.all(sampler.scales(np.random.default_rng(1), 10) > 0)
    with pytest.raises(DataError):
        WindowSampler(ds, 400)


def test_last_window_and_drop_tail():
    s = Series("s", "2020", "H", np.arange(100.0))
    np.testing.assert_array_equal(last_window(s, 10)[:, 0], np.arange(90, 100))
    np.testing.assert_array_equal(last_window(s, 10, (5,), end=50)[:, 1], np.arange(35, 45))
    with pytest.raises(Exception):
        last_window(s, 10, end=5)
    from tsguide.data import Dataset

    d = Dataset([s]).drop_tail(30)
    assert len(d.series[0]) == 70
