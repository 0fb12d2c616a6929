import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtopo import confidence, preprocess, reconnect
from gridtopo.errors import ConfigError, StructuralError


def test_worked_example_scores():
    # DBI 0.316 (ours) vs 0.955 (given); correlation 0.991 (ours) vs 0.717 (given)
    assert confidence.score_dbi(0.316, 0.955) == pytest.approx(0.7514, abs=1e-3)
    assert confidence.score_corr(0.991, 0.717) == pytest.approx(0.7993, abs=1e-3)
    assert confidence.sigmoid(0.0) == 0.5


def test_sigmoid_is_stable_at_extremes():
    assert confidence.sigmoid(1000.0) == 1.0
    assert confidence.sigmoid(-1000.0) == 0.0


def test_score_dbi_complementary():
    rng = np.random.default_rng(0)
    for a, b in rng.uniform(1e-3, 10.0, size=(1000, 2)):
        assert abs(confidence.score_dbi(a, b) + confidence.score_dbi(b, a) - 1.0) <= 1e-12


def test_score_dbi_degenerate():
    assert confidence.score_dbi(math.inf, math.inf) == 0.5
    assert confidence.score_dbi(0.5, math.inf) == 1.0
    assert confidence.score_dbi(0.0, 0.0) == 0.5


def test_confidence_level_monotone_grid():
    grid = np.linspace(0.0, 1.0, 100)
    L = np.array([[confidence.confidence_level(a, b) for b in grid] for a in grid])
    assert np.all(np.diff(L, axis=0) > 0) and np.all(np.diff(L, axis=1) > 0)
    with pytest.raises(ConfigError):
        confidence.confidence_level(0.5, 0.5, 0.6, 0.6)


def test_dbi_hand_computed():
    # two pairs: scatter 0.5 each, centroid gap 5 -> (0.5 + 0.5) / 5
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 5.0], [1.0, 5.0]])
    assert confidence.dbi([a, b]) == pytest.approx(0.2, abs=1e-15)
    assert confidence.dbi([a, a + 0.0]) == math.inf
    with pytest.raises(StructuralError):
        confidence.dbi([a])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_dbi_matches_sklearn(seed, k):
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    labels = np.arange(40) % k
    X += labels[:, None] * 2.0
    ours = confidence.dbi([X[labels == j] for j in range(k)])
    assert ours == pytest.approx(metrics.davies_bouldin_score(X, labels), rel=1e-10)


def _reassign_all(bundle):
    pu, _, _ = preprocess.clean(bundle.corrupted, bundle.series, bundle.constraints)
    outliers = [p for p, _, _ in bundle.corruption_log]
    rs, cands, _ = reconnect.reconnect_all(outliers, bundle.corrupted, pu)
    return pu, rs, cands


def test_falsify_prefers_truth(small_bundle):
    pu, rs, cands = _reassign_all(small_bundle)
    truth = small_bundle.truth.edges
    rights, wrongs = [], []
    for r in rs[:15]:
        b = confidence.assess(r, cands[r.premise_id], small_bundle.corrupted, pu)
        assert 0.0 <= b.level <= 1.0
        assert b.level == pytest.approx(0.7 * b.score_dbi + 0.3 * b.score_corr, abs=1e-15)
        assert b.new_transformer not in b.falsified_against
        rights.append(b.level)
        wrong = reconnect.Reassignment(r.premise_id, r.old_transformer,
                                       next(t for t in cands[r.premise_id].transformers if t != truth[r.premise_id]),
                                       r.method)
        wrongs.append(confidence.assess(wrong, cands[r.premise_id], small_bundle.corrupted, pu).level)
    # the correlation term is sigmoid of a non-negative ratio, so wrong links still score near 0.5
    assert np.mean(rights) > np.mean(wrongs)
    assert np.mean(np.array(rights) > np.array(wrongs)) >= 0.9


def test_rank_report_and_csv(tmp_path):
    mk = lambda pid, lvl: confidence.ConfidenceBreakdown(pid, "A", "B", 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, lvl, ("A",))
    entries = confidence.rank_report([mk("p", 0.4), mk("q", 0.9), mk("a", 0.4)])
    assert [(e.breakdown.premise_id, e.needs_review) for e in entries] == [("q", False), ("a", True), ("p", True)]
    confidence.write_report_csv(entries, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",") == confidence.REPORT_COLUMNS and lines[1].endswith(",OK")
    b = entries[0].breakdown
    assert confidence.ConfidenceBreakdown.from_dict(b.to_dict()) == b
