import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridtopo import preprocess
from gridtopo.errors import DataError, UnresolvableError
from gridtopo.model import ConstraintSet, GeoPoint, PremiseRecord, Topology, TransformerRecord

from conftest import make_frame


def test_iqr_hand_computed_quartiles():
    # 1..8 plus 100: linear quantiles give Q1=3, Q3=7, fences [-3, 13]
    res = preprocess.iqr_filter(list(range(1, 9)) + [100])
    assert res.removed == 1
    assert np.isnan(res.values[-1])
    np.testing.assert_array_equal(res.values[:-1], np.arange(1, 9))


def test_iqr_fence_is_inclusive():
    # Q1=2, Q3=4 -> fences [-1, 7] with k=1.5; a value on the fence stays
    v = [2, 2, 2, 4, 4, 4, 7, -1, 3]
    assert np.percentile(v, 25) == 2 and np.percentile(v, 75) == 4
    assert preprocess.iqr_filter(v).removed == 0
    assert preprocess.iqr_filter(v[:-1] + [7.001]).removed == 1


def test_iqr_short_series():
    res = preprocess.iqr_filter([1.0, 2.0, 300.0])
    assert res.too_short and res.removed == 0


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(4, 200), elements=st.floats(-1e4, 1e4)))
def test_iqr_idempotent(v):
    once = preprocess.iqr_filter(v).values
    twice = preprocess.iqr_filter(once)
    np.testing.assert_array_equal(np.isnan(once), np.isnan(twice.values))
    assert twice.removed == 0


def _premises(nominals, locs=None):
    return [PremiseRecord(pid, GeoPoint(*locs[pid]) if locs else None, nominal_voltage=v)
            for pid, v in nominals.items()]


def test_infer_nominal_mode_and_tie():
    p = PremiseRecord("x", GeoPoint(0.0, 0.0))
    ns = _premises({"a": 120.0, "b": 240.0, "c": 240.0})
    assert preprocess.infer_nominal(p, ns) == 240.0
    tie = _premises({"a": 120.0, "b": 240.0}, {"a": (0.0, 0.001), "b": (0.0, 0.01)})
    assert preprocess.infer_nominal(p, tie) == 120.0
    with pytest.raises(UnresolvableError):
        preprocess.infer_nominal(p, _premises({"a": None}))


def test_normalize_roundtrip():
    f = make_frame(["a", "b"], [[240.0, 252.0], [120.0, 114.0]])
    pu = preprocess.normalize_per_unit(f, {"a": 240.0, "b": 120.0})
    np.testing.assert_allclose(pu.va, [[1.0, 1.05], [1.0, 0.95]])
    assert preprocess.denormalize(pu, {"a": 240.0, "b": 120.0}).equals(f, atol=1e-12)
    with pytest.raises(DataError):
        preprocess.normalize_per_unit(f, {"a": 240.0})


def test_drop_incomplete():
    v = np.full((2, 10), 240.0)
    v[1, :2] = np.nan
    kept, dropped = preprocess.drop_incomplete(make_frame(["a", "b"], v), 0.9)
    assert dropped == ["b"] and kept.ids == ("a",)
    kept, dropped = preprocess.drop_incomplete(make_frame(["a", "b"], v), 0.8)
    assert dropped == []


def test_flatline_dropped():
    rng = np.random.default_rng(0)
    v = np.vstack([1.0 + 0.01 * rng.normal(size=200), np.full(200, 1.0)])
    kept, dropped = preprocess.flatline_filter(make_frame(["live", "flat"], v))
    assert dropped == ["flat"] and kept.ids == ("live",)


def test_clean_reports_every_drop():
    rng = np.random.default_rng(1)
    T = 200
    v = 240.0 * (1.0 + 0.01 * rng.normal(size=(4, T)))
    v[1] = 240.0  # flatline
    v[2, : T // 5] = np.nan  # incomplete
    v[3] = 100.0  # stuck far below the band
    ids = ["a", "b", "c", "d"]
    txs = [TransformerRecord("T", GeoPoint(0.0, 0.0), 25.0)]
    prem = [PremiseRecord(p, GeoPoint(0.0, 0.0), nominal_voltage=240.0) for p in ids]
    topo = Topology(prem, txs, {p: "T" for p in ids})
    pu, nominals, report = preprocess.clean(topo, make_frame(ids, v), ConstraintSet())
    assert pu.ids == ("a",)
    assert report.dropped_flatline == ["b"]
    assert report.dropped_incomplete == ["c"]
    assert report.dropped_range == ["d"]
    assert preprocess.CleaningReport.from_dict(report.to_dict()) == report


def test_clean_infers_missing_nominal():
    ids = ["a", "b", "c"]
    txs = [TransformerRecord("T", GeoPoint(0.0, 0.0), 25.0)]
    prem = [PremiseRecord("a", GeoPoint(0.0, 0.0), nominal_voltage=None),
            PremiseRecord("b", GeoPoint(0.0, 0.0), nominal_voltage=120.0),
            PremiseRecord("c", GeoPoint(0.0, 0.0), nominal_voltage=120.0)]
    topo = Topology(prem, txs, {p: "T" for p in ids})
    rng = np.random.default_rng(2)
    v = 120.0 * (1.0 + 0.01 * rng.normal(size=(3, 200)))
    pu, nominals, report = preprocess.clean(topo, make_frame(ids, v), ConstraintSet())
    assert report.inferred_nominal == {"a": 120.0}
    assert abs(np.nanmean(pu.va[0]) - 1.0) < 0.01
