"""Falsification-based confidence for inferred edges.

An assignment "premise i belongs on transformer T" is scored by how much
worse the alternatives look. Clustering quality (Davies-Bouldin index of
the transformer partition with i placed on T vs. on a rival) and voltage
correlation (i vs. T's premises vs. i vs. the rivals' premises) are each
squashed through a sigmoid and blended 0.7 / 0.3.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .detect import MIN_OVERLAP
from .errors import ConfigError, StructuralError, UnresolvableError
from .model import SeriesFrame, Topology
from .reconnect import (
    CandidateSet,
    FeatureVector,
    Method,
    Reassignment,
    build_candidates,
    featurize,
)

W_DBI = 0.7
W_CORR = 0.3
REVIEW_THRESHOLD = 0.5
FLOOR = 1e-12

REPORT_COLUMNS = [
    "PREMISE_ID", "OLD_XFMR", "NEW_XFMR", "DBI_TRUE", "DBI_FALSE", "CORR_OURS",
    "CORR_FALSE", "SCORE_DBI", "SCORE_CORR", "LEVEL", "FLAG",
]


@dataclass(frozen=True)
class ConfidenceBreakdown:
    premise_id: str
    old_transformer: str
    new_transformer: str
    dbi_true: float
    dbi_false: float
    corr_ours: float
    corr_false: float
    score_dbi: float
    score_corr: float
    level: float
    falsified_against: tuple = ()

    def to_dict(self):
        d = asdict(self)
        d["falsified_against"] = list(self.falsified_against)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["falsified_against"] = tuple(d.get("falsified_against", ()))
        return cls(**d)


@dataclass(frozen=True)
class ReportEntry:
    breakdown: ConfidenceBreakdown
    needs_review: bool


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def dbi(clusters: Sequence[np.ndarray]) -> float:
    """Davies-Bouldin index of point sets; ``inf`` when two centroids coincide."""
    pts = [np.atleast_2d(np.asarray(c, dtype=float)) for c in clusters]
    pts = [c for c in pts if c.size]
    if len(pts) < 2:
        raise StructuralError("DBI needs at least two non-empty clusters")
    cents = np.vstack([c.mean(axis=0) for c in pts])
    S = np.array([np.sqrt(((c - m) ** 2).sum(axis=1)).mean() for c, m in zip(pts, cents)])
    k = len(pts)
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i == j:
                continue
            d = float(np.sqrt(((cents[i] - cents[j]) ** 2).sum()))
            if d == 0.0:
                return math.inf
            worst = max(worst, (S[i] + S[j]) / d)
        total += worst
    return total / k


def score_dbi(dbi_true: float, dbi_false: float) -> float:
    """sigmoid(ln(dbi_false / dbi_true)), i.e. dbi_false / (dbi_true + dbi_false)."""
    t = max(dbi_true, FLOOR)
    f = max(dbi_false, FLOOR)
    if math.isinf(t) and math.isinf(f):
        return 0.5
    if math.isinf(f):
        return 1.0
    return f / (t + f)


def score_corr(corr_ours: float, corr_false: float) -> float:
    ours = min(1.0, max(0.0, corr_ours))
    false = max(min(1.0, max(0.0, corr_false)), FLOOR)
    return sigmoid(ours / false)


def confidence_level(score_dbi: float, score_corr: float, w_dbi: float = W_DBI, w_corr: float = W_CORR) -> float:
    if w_dbi < 0 or w_corr < 0 or abs(w_dbi + w_corr - 1.0) > 1e-9:
        raise ConfigError(f"confidence weights must be non-negative and sum to 1, got {w_dbi}, {w_corr}")
    return w_dbi * score_dbi + w_corr * score_corr


def _mean_corr(v, others: Sequence[np.ndarray]) -> float:
    vals = [kernels.pearson_pair(v, o, MIN_OVERLAP) for o in others]
    vals = [r for r in vals if not math.isnan(r)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def falsify(
    reassignment: Reassignment,
    candidates: CandidateSet,
    features: Sequence[FeatureVector],
    series: SeriesFrame,
    topology: Topology,
    w_dbi: float = W_DBI,
    w_corr: float = W_CORR,
    rival: str = "min",
) -> ConfidenceBreakdown:
    """Score ``reassignment`` against every other candidate transformer.

    ``rival`` picks how alternative DBIs combine: ``"min"`` keeps the most
    plausible rival, ``"mean"`` averages them.
    """
    outlier = reassignment.premise_id
    chosen = reassignment.new_transformer
    fmap = {f.premise_id: f.values for f in features}
    if outlier not in fmap:
        raise UnresolvableError(f"no feature vector for {outlier}")
    groups: dict[str, list[str]] = {tid: [] for tid in candidates.transformers}
    for pid in candidates.premises:
        tid = topology.edges.get(pid)
        if tid in groups and pid in fmap:
            groups[tid].append(pid)
    if chosen not in groups:
        raise StructuralError(f"{chosen} is not a candidate transformer of {outlier}")

    def partition_dbi(target):
        clusters = []
        for tid, members in groups.items():
            rows = [fmap[p] for p in members]
            if tid == target:
                rows.append(fmap[outlier])
            if rows:
                clusters.append(np.vstack(rows))
        if len(clusters) < 2:
            return None
        return dbi(clusters)

    alternatives = [tid for tid in candidates.transformers if tid != chosen and groups[tid]]
    if not alternatives:
        raise UnresolvableError(f"no populated alternative transformer for {outlier}")
    d_true = partition_dbi(chosen)
    rivals = {}
    for tid in alternatives:
        d = partition_dbi(tid)
        if d is not None:
            rivals[tid] = d
    if d_true is None or not rivals:
        raise UnresolvableError(f"cannot form two clusters around {outlier}")
    if rival == "mean":
        d_false = math.fsum(rivals.values()) / len(rivals)
    else:
        d_false = min(rivals.values())

    v = series.voltage(outlier)
    ours = _mean_corr(v, [series.voltage(p) for p in groups[chosen] if p in series])
    false = _mean_corr(v, [series.voltage(p) for t in alternatives for p in groups[t] if p in series])
    ours = 0.0 if math.isnan(ours) else min(1.0, max(0.0, ours))
    false = 0.0 if math.isnan(false) else min(1.0, max(0.0, false))
    s_dbi = score_dbi(d_true, d_false)
    s_corr = score_corr(ours, false)
    return ConfidenceBreakdown(
        outlier, reassignment.old_transformer, chosen, d_true, d_false, ours, false,
        s_dbi, s_corr, confidence_level(s_dbi, s_corr, w_dbi, w_corr), tuple(sorted(rivals)),
    )


def assess(
    reassignment: Reassignment,
    candidates: CandidateSet,
    topology: Topology,
    series: SeriesFrame,
    **kw,
) -> ConfidenceBreakdown:
    """Featurize the candidate neighborhood and run ``falsify``."""
    prem = [topology.premises[reassignment.premise_id]] + [topology.premises[p] for p in candidates.premises]
    return falsify(reassignment, candidates, featurize(prem, series), series, topology, **kw)


def membership_confidence(
    premise_id: str,
    topology: Topology,
    series: SeriesFrame,
    k: int = 2,
    **kw,
) -> Optional[ConfidenceBreakdown]:
    """Confidence that a premise belongs on the transformer it is on now."""
    tid = topology.edges[premise_id]
    try:
        cands = build_candidates(premise_id, topology, k)
        keep = Reassignment(premise_id, tid, tid, Method.KMEANS)
        return assess(keep, cands, topology, series, **kw)
    except (UnresolvableError, StructuralError):
        return None


def rank_report(breakdowns: Sequence[ConfidenceBreakdown], threshold: float = REVIEW_THRESHOLD) -> list[ReportEntry]:
    ordered = sorted(breakdowns, key=lambda b: (-b.level, b.premise_id))
    return [ReportEntry(b, b.level < threshold) for b in ordered]


def _num(x):
    return repr(float(x))


def write_report_csv(entries: Sequence[ReportEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for e in entries:
            b = e.breakdown
            w.writerow([
                b.premise_id, b.old_transformer, b.new_transformer,
                _num(b.dbi_true), _num(b.dbi_false), _num(b.corr_ours), _num(b.corr_false),
                _num(b.score_dbi), _num(b.score_corr), _num(b.level),
                "NEEDS_REVIEW" if e.needs_review else "OK",
            ])


def write_report_json(entries: Sequence[ReportEntry], path) -> None:
    with open(path, "w") as fh:
        json.dump([{**e.breakdown.to_dict(), "needs_review": e.needs_review} for e in entries], fh, indent=1)


def levels_by_premise(breakdowns: Sequence[ConfidenceBreakdown]) -> Mapping[str, float]:
    return {b.premise_id: b.level for b in breakdowns}
