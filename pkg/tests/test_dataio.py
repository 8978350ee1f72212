import datetime as dt
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precipcnn.channelizer import make_windows
from precipcnn.dataio import (AtmosDataset, FormatError, SplitSpec, SyntheticSpec, compute_stats, generate_synthetic,
                              load_dataset, save_dataset, scaled_split, split, standardize, standardize_targets,
                              unstandardize_targets)

D = dt.date


def tiny(days=6, precision="f64", seed=0, start=D(2000, 1, 1)):
    return generate_synthetic(SyntheticSpec(days=days, grid=(4, 5), levels=(500, 850, 925), variables=2,
                                            seed=seed, precision=precision, start_date=start))


def bare(start, end):
    """Calendar-only dataset with a 1x1 grid, for split tests."""
    n = (end - start).days + 1
    return AtmosDataset(np.zeros((n, 4, 1, 1, 1, 1)), np.zeros(n), start, ["q"], [925.0])


# --- container ----------------------------------------------------------------

@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_roundtrip_bit_exact(tmp_path, precision):
    ds = tiny(precision=precision)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.stack.dtype == ds.stack.dtype and np.array_equal(back.stack, ds.stack)
    assert np.array_equal(back.targets, ds.targets)
    assert (back.start_date, back.variables, back.levels, back.slots) == (ds.start_date, ds.variables, ds.levels,
                                                                          ds.slots)


def test_manifest_fields_and_blob_layout(tmp_path):
    ds = tiny()
    save_dataset(ds, tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["format_version"] == 1 and m["dims"] == dict(D=6, S=4, V=2, L=3, H=4, W=5)
    assert m["slots"] == ["03:00", "09:00", "15:00", "21:00"] and m["precision"] == "f64"
    raw = (tmp_path / "d" / m["stack_file"]).read_bytes()
    assert raw[:4] == b"AGR1" and len(raw) == 4 + ds.stack.size * 8
    assert np.array_equal(np.frombuffer(raw[4:], "<f8").reshape(ds.stack.shape), ds.stack)
    assert (tmp_path / "d" / m["target_file"]).read_bytes()[:4] == b"TGT1"


def _edit_manifest(path, **changes):
    m = json.loads((path / "manifest.json").read_text())
    m.update(changes)
    (path / "manifest.json").write_text(json.dumps(m))


def test_corrupt_inputs_are_rejected(tmp_path):
    ds = tiny()
    p = save_dataset(ds, tmp_path / "d")
    blob = (p / "stack.bin").read_bytes()
    (p / "stack.bin").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_dataset(p)
    (p / "stack.bin").write_bytes(blob + b"\0" * 8)
    with pytest.raises(FormatError, match="trailing"):
        load_dataset(p)
    (p / "stack.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_dataset(p)
    (p / "stack.bin").write_bytes(blob)
    _edit_manifest(p, dims=dict(D=7, S=4, V=2, L=3, H=4, W=5))
    with pytest.raises(FormatError):
        load_dataset(p)
    _edit_manifest(p, dims=dict(D=6, S=4, V=2, L=3, H=4, W=5), format_version=2)
    with pytest.raises(FormatError, match="format_version"):
        load_dataset(p)
    _edit_manifest(p, format_version=1, levels_hpa=[500])
    with pytest.raises(FormatError):
        load_dataset(p)
    (p / "manifest.json").write_text("{")
    with pytest.raises(FormatError):
        load_dataset(p)


# --- splits -------------------------------------------------------------------

def test_default_split_years():
    ds = bare(D(1980, 1, 1), D(2015, 12, 31))
    r = split(ds, SplitSpec())
    assert r["train"] == (0, ds.day_index(D(2006, 1, 1)))
    assert r["validation"][0] == r["train"][1] and r["test"][0] == r["validation"][1]
    assert r["test"][1] == ds.days
    years = {k: (ds.date(b - 1).year - ds.date(a).year + 1) for k, (a, b) in r.items()}
    assert years == {"train": 26, "validation": 5, "test": 5}


def test_split_errors():
    with pytest.raises(ValueError, match="not covered"):
        split(bare(D(1990, 1, 1), D(1990, 12, 31)), SplitSpec())
    ds = bare(D(2000, 1, 1), D(2000, 12, 31))
    overlap = SplitSpec((D(2000, 1, 1), D(2000, 6, 30)), (D(2000, 6, 30), D(2000, 9, 30)),
                        (D(2000, 10, 1), D(2000, 12, 31)))
    with pytest.raises(ValueError, match="overlap"):
        split(ds, overlap)
    gap = SplitSpec((D(2000, 1, 1), D(2000, 6, 30)), (D(2000, 7, 2), D(2000, 9, 30)),
                    (D(2000, 10, 1), D(2000, 12, 31)))
    with pytest.raises(ValueError, match="gap"):
        split(ds, gap)


@given(st.integers(3, 2000))
def test_scaled_split_partitions_and_ts6_stays_inside(n):
    ds = bare(D(2001, 1, 1), D(2001, 1, 1) + dt.timedelta(days=n - 1))
    r = split(ds, scaled_split(ds))
    bounds = [r["train"], r["validation"], r["test"]]
    assert bounds[0][0] == 0 and bounds[-1][1] == n
    assert all(a < b for a, b in bounds) and all(x[1] == y[0] for x, y in zip(bounds, bounds[1:]))
    for a, b in bounds:
        if b - a >= 3:
            for w in make_windows(n, "ts6", (a, b)):
                assert all(a <= d < b for d, _ in w.slots)


# --- standardization --------------------------------------------------------------

def test_stats_match_two_pass_oracle():
    ds = tiny(days=9, seed=3)
    stats = compute_stats(ds, (0, 7))
    S, V, L = ds.stack.shape[1:4]
    for s in range(S):
        for v in range(V):
            for lv in range(L):
                vals = [float(x) for x in ds.stack[:7, s, v, lv].ravel()]
                mean = sum(vals) / len(vals)
                std = math.sqrt(sum((x - mean) ** 2 for x in vals) / len(vals))
                assert abs(stats.mean[s, v, lv] - mean) <= 1e-10
                assert abs(stats.std[s, v, lv] - std) <= 1e-10
    z = standardize(ds.stack[:7], stats)
    assert np.max(np.abs(z.mean(axis=(0, 4, 5)))) <= 1e-6
    assert np.max(np.abs(z.std(axis=(0, 4, 5)) - 1)) <= 1e-6


def test_constant_channel_flagged_and_zeroed():
    ds = tiny()
    ds.stack[:, 1, 0, 2] = 4.2
    stats = compute_stats(ds, (0, 6))
    assert stats.constant[1, 0, 2] and stats.constant.sum() == 1 and stats.std[1, 0, 2] == 1.0
    assert not standardize(ds.stack, stats)[:, 1, 0, 2].any()


def test_standardize_is_idempotent_on_standardized_data():
    ds = tiny(days=20)
    z = standardize(ds.stack, compute_stats(ds, (0, 20)))
    again = AtmosDataset(z, ds.targets, ds.start_date, ds.variables, ds.levels)
    assert np.max(np.abs(standardize(z, compute_stats(again, (0, 20))) - z)) <= 1e-9


def test_target_standardization_roundtrip():
    ds = tiny(days=20)
    stats = compute_stats(ds, (0, 15))
    z = standardize_targets(ds.targets, stats)
    assert abs(z[:15].mean()) <= 1e-12
    assert np.allclose(unstandardize_targets(z, stats), ds.targets, rtol=0, atol=1e-12)


# --- synthetic generator ---------------------------------------------------------

def test_synthetic_is_deterministic():
    a, b, c = tiny(seed=5), tiny(seed=5), tiny(seed=6)
    assert np.array_equal(a.stack, b.stack) and np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.stack, c.stack)


def test_noise_free_target_matches_independent_oracle():
    ds = generate_synthetic(SyntheticSpec(days=12, grid=(8, 8), levels=(500, 700, 850, 925, 1000), variables=4,
                                          seed=2))
    assert ds.variables[0] == "specific_humidity" and ds.variables[3] == "air_temperature"
    lv = {p: ds.levels.index(p) for p in (500.0, 850.0, 925.0)}
    rows, cols = range(2, 6), range(2, 6)  # middle half of an 8x8 grid

    def box(day, slot, var, level):
        return sum(float(ds.stack[day, slot, var, level, i, j]) for i in rows for j in cols) / 16

    for d in range(ds.days):
        q15 = box(d, 2, 0, lv[925.0])
        q03 = box(d, 0, 0, lv[925.0])
        vert = q15 - box(d, 2, 0, lv[500.0])
        temp = box(d, 2, 3, lv[850.0])
        z = 0.8 * q15 + 1.5 * vert * temp + 1.0 * (q15 - q03) - 1.0
        expected = 10.0 * math.log1p(math.exp(z))
        assert abs(ds.targets[d] - expected) <= 1e-12 * max(1.0, expected)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(0, 5))
def test_targets_non_negative(seed, noise):
    ds = generate_synthetic(SyntheticSpec(days=5, grid=(4, 4), levels=(500, 925), variables=2, seed=seed,
                                          noise_std=noise))
    assert np.all(ds.targets >= 0) and np.all(np.isfinite(ds.targets))


def test_invalid_synthetic_specs():
    for kw in (dict(days=2), dict(grid=(2, 8)), dict(noise_std=-1.0), dict(variables=0)):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**kw))
