import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridtopo import kernels

R = kernels.EARTH_RADIUS_M


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in kernels.backends()


def test_one_degree_on_equator(backend):
    d = backend.haversine_matrix([0.0], [0.0], [0.0], [1.0], R)[0, 0]
    assert d == pytest.approx(math.pi * R / 180.0, rel=1e-12)
    assert abs(d - 111195.0) < 1.0


def test_antipodes(backend):
    d = backend.haversine_matrix([0.0], [0.0], [0.0], [180.0], R)[0, 0]
    assert d == pytest.approx(math.pi * R, rel=1e-12)


def test_backends_agree():
    if len(kernels.backends()) < 2:
        pytest.skip("compiled extension not built")
    py, cy = kernels.backends()["python"], kernels.backends()["cython"]
    rng = np.random.default_rng(0)
    lat = rng.uniform(-80, 80, 50)
    lon = rng.uniform(-179, 179, 50)
    np.testing.assert_allclose(py.haversine_matrix(lat, lon, lat[:7], lon[:7], R),
                               cy.haversine_matrix(lat, lon, lat[:7], lon[:7], R), rtol=1e-12, atol=1e-9)
    X = rng.normal(size=(12, 300))
    X[3, 10:40] = np.nan
    np.testing.assert_allclose(py.pearson_matrix(X, 96), cy.pearson_matrix(X, 96), atol=1e-12)
    for i in range(1, 12):
        assert py.pearson_pair(X[0], X[i], 96) == pytest.approx(cy.pearson_pair(X[0], X[i], 96), abs=1e-12)
        if i != 3:  # MI kernels take complete samples only
            assert py.hist_mi(X[0], X[i], 16) == cy.hist_mi(X[0], X[i], 16)
            assert py.hist_entropy(X[i], 16) == cy.hist_entropy(X[i], 16)
    C = rng.normal(size=(3, 300))
    lp, dp = py.lloyd_assign(X[:, :50], np.ascontiguousarray(C[:, :50]))
    lc, dc = cy.lloyd_assign(X[:, :50], np.ascontiguousarray(C[:, :50]))
    np.testing.assert_array_equal(lp, lc)
    np.testing.assert_allclose(dp, dc, rtol=1e-12)


def test_pearson_matches_numpy(backend):
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 500))
    y = 0.3 * x + y
    y[5:20] = np.nan
    m = ~np.isnan(y)
    assert backend.pearson_pair(x, y, 96) == pytest.approx(np.corrcoef(x[m], y[m])[0, 1], abs=1e-12)


def test_pearson_insufficient_overlap(backend):
    x = np.arange(200.0)
    y = x.copy()
    y[:150] = np.nan
    assert math.isnan(backend.pearson_pair(x, y, 96))
    assert math.isnan(backend.pearson_pair(np.ones(200), x, 96))


def test_pearson_matrix_nan_path(backend):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5, 200))
    X[1, :30] = np.nan
    M = backend.pearson_matrix(X, 96)
    for i in range(5):
        for j in range(5):
            assert M[i, j] == pytest.approx(backend.pearson_pair(X[i], X[j], 96), abs=1e-12)


def test_mi_against_sklearn(backend):
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    x = rng.normal(size=800)
    y = x + rng.normal(size=800)

    def codes(v, bins=16):
        lo, hi = v.min(), v.max()
        return np.minimum(np.floor((v - lo) / (hi - lo) * bins), bins - 1).astype(int)

    mi, degenerate = backend.hist_mi(x, y, 16)
    assert not degenerate
    assert mi == pytest.approx(metrics.mutual_info_score(codes(x), codes(y)), abs=1e-12)


def test_mi_degenerate(backend):
    mi, degenerate = backend.hist_mi(np.ones(200), np.arange(200.0), 16)
    assert mi == 0.0 and degenerate


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(100, 400), elements=st.floats(-1e3, 1e3)), st.integers(2, 32))
def test_mi_self_is_entropy(x, bins):
    mi, _ = kernels.hist_mi(x, x, bins)
    assert abs(mi - kernels.hist_entropy(x, bins)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 32))
def test_mi_symmetric_nonnegative(seed, bins):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 300))
    y = y + rng.uniform() * x
    a = kernels.hist_mi(x, y, bins)[0]
    b = kernels.hist_mi(y, x, bins)[0]
    assert a == b
    assert a >= 0.0


def test_lloyd_assign_ties_go_to_lower_index(backend):
    X = np.array([[0.0, 0.0], [2.0, 0.0]])
    C = np.array([[1.0, 1.0], [1.0, -1.0]])
    labels, d2 = backend.lloyd_assign(X, C)
    assert labels.tolist() == [0, 0]
    np.testing.assert_allclose(d2, [2.0, 2.0])
