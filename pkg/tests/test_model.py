import numpy as np
import pytest

from gridtopo.errors import DataError, StructuralError
from gridtopo.model import (
    ConstraintSet, GeoPoint, PhaseLabel, PremiseRecord, SeriesFrame, Topology, TransformerRecord,
    accuracy, diff_topologies, group_by_transformer,
)

from conftest import START, make_frame, toy_topology


def test_geopoint_ranges():
    GeoPoint(90, 180)
    for lat, lon in ((91, 0), (0, 181), (float("nan"), 0)):
        with pytest.raises(DataError):
            GeoPoint(lat, lon)


def test_phase_label_roundtrip():
    assert str(PhaseLabel.parse("ab")) == "AB"
    assert not PhaseLabel.parse("").energized
    with pytest.raises(DataError):
        PhaseLabel.parse("AD")


def test_records_validate():
    with pytest.raises(DataError):
        PremiseRecord("p", nominal_voltage=0.0)
    with pytest.raises(DataError):
        TransformerRecord("t", None, -5.0)
    assert TransformerRecord("t", None, None).rated_kva is None


def test_constraints():
    c = ConstraintSet(rated_kva={"T1": 50.0})
    assert c.band_pu() == (228 / 240, 252 / 240)
    assert c.rating(TransformerRecord("T1", None, 25.0)) == 50.0
    assert c.rating(TransformerRecord("T2", None, None)) is None
    with pytest.raises(DataError):
        ConstraintSet(v_min=250, v_max=240)


def test_topology_rejects_dangling_edges():
    with pytest.raises(StructuralError):
        toy_topology({"p1": (0, 0)}, {"A": (0, 0, 10)}, {"p1": "B"})
    with pytest.raises(StructuralError):
        toy_topology({"p1": (0, 0)}, {"A": (0, 0, 10)}, {"p2": "A"})


def test_topology_duplicate_ids():
    p = PremiseRecord("p1")
    with pytest.raises(DataError):
        Topology([p, p], [], {})


def test_topology_is_immutable_and_ordered():
    topo = toy_topology({"p2": (0, 0), "p1": (0, 0)}, {"A": (0, 0, 10), "B": (0, 0, 10)}, {"p2": "B", "p1": "A"})
    assert list(topo.edges) == ["p1", "p2"]
    with pytest.raises(TypeError):
        topo.edges["p1"] = "B"
    moved = topo.with_edges({"p1": "B"})
    assert topo.edges["p1"] == "A" and moved.edges["p1"] == "B"
    assert group_by_transformer(moved) == {"A": [], "B": ["p1", "p2"]}


def test_diff_and_accuracy():
    a = toy_topology({"p1": (0, 0), "p2": (0, 0)}, {"A": (0, 0, 10), "B": (0, 0, 10)}, {"p1": "A", "p2": "A"})
    b = a.with_edges({"p2": "B"})
    assert diff_topologies(a, b) == [("p2", "A", "B")]
    assert accuracy(b, a) == 0.5
    assert a == a.with_edges({})
    other = toy_topology({"p1": (0, 0)}, {"A": (0, 0, 10)}, {"p1": "A"})
    with pytest.raises(StructuralError):
        diff_topologies(a, other)


def test_series_frame_contracts():
    f = make_frame(["a", "b"], np.arange(8.0).reshape(2, 4))
    assert f.n_steps == 4 and len(f) == 2
    assert np.isnan(f.vb).all()
    assert f.primary_channel("a") == "va"
    with pytest.raises(ValueError):
        f.va[0, 0] = 1.0
    assert f.subset(["b"]).ids == ("b",)
    assert f.drop(["a"]).ids == ("b",)
    assert f.equals(make_frame(["a", "b"], np.arange(8.0).reshape(2, 4)))


def test_series_frame_rejects_irregular_grid():
    ts = START + np.array([0, 15, 45], dtype="timedelta64[m]")
    with pytest.raises(DataError):
        SeriesFrame(ts, ("a",), np.zeros((1, 3)), None, None, None, None)


def test_primary_channel_falls_back():
    ts = START + np.arange(3) * np.timedelta64(15, "m")
    f = SeriesFrame(ts, ("a",), None, np.ones((1, 3)), None, None, None)
    assert f.primary_channel("a") == "vb"
    np.testing.assert_array_equal(f.voltage("a"), np.ones(3))
