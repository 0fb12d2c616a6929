"""Local reconnection of flagged premises.

Each outlier is resolved inside its own neighborhood: the K nearest
transformers (plus the one it is currently on) and the premises they
serve. Two routes are available:

``kmeans``
    Cluster joint voltage + coordinate feature vectors, pair every cluster
    with the transformer that serves most of its members, and move the
    outlier to its own cluster's transformer.
``mutual_information``
    Pick the transformer whose premises share the highest average
    histogram mutual information with the outlier's voltage.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .detect import MIN_OVERLAP
from .errors import StructuralError, UnresolvableError
from .model import PremiseRecord, SeriesFrame, Topology

log = logging.getLogger(__name__)

DEFAULT_K = 2
DEFAULT_BINS = 16
N_INIT = 10
MAX_ITER = 100

REASSIGNMENT_COLUMNS = ["PREMISE_ID", "OLD_XFMR", "NEW_XFMR", "METHOD"]


class Method(str, Enum):
    KMEANS = "kmeans"
    MUTUAL_INFORMATION = "mutual_information"


@dataclass(frozen=True)
class CandidateSet:
    outlier: str
    transformers: tuple  # sorted by distance to the outlier
    premises: tuple  # members of those transformers, outlier excluded
    distances_m: tuple = ()


@dataclass(frozen=True, eq=False)
class FeatureVector:
    premise_id: str
    values: np.ndarray


@dataclass(frozen=True)
class Reassignment:
    premise_id: str
    old_transformer: str
    new_transformer: str
    method: Method
    cluster_index: Optional[int] = None

    @property
    def changed(self) -> bool:
        return self.old_transformer != self.new_transformer

    def to_dict(self):
        return {
            "premise_id": self.premise_id,
            "old_transformer": self.old_transformer,
            "new_transformer": self.new_transformer,
            "method": self.method.value,
            "cluster_index": self.cluster_index,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["premise_id"], d["old_transformer"], d["new_transformer"],
                   Method(d["method"]), d.get("cluster_index"))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # objective per Lloyd iteration, best restart

    def clusters(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == j) for j in range(self.centroids.shape[0])]


# -- candidates and features -------------------------------------------------

def build_candidates(outlier: str, topology: Topology, k: int = DEFAULT_K, exclude=()) -> CandidateSet:
    """The k nearest transformers (plus the current one) and their premises.

    Premises in ``exclude`` are left out of the labeled set, e.g. other
    suspected outliers whose recorded transformer is itself in doubt.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    p = topology.premises[outlier]
    if p.location is None:
        raise UnresolvableError(f"outlier {outlier} has no location")
    txs = [t for t in topology.transformers.values() if t.location is not None]
    if len(txs) < k:
        raise UnresolvableError(f"need {k} located transformers, have {len(txs)}")
    d = kernels.haversine_matrix(
        [p.location.lat], [p.location.lon],
        [t.location.lat for t in txs], [t.location.lon for t in txs],
    )[0]
    order = sorted(range(len(txs)), key=lambda j: (d[j], txs[j].id))
    chosen = order[:k]
    current = topology.edges.get(outlier)
    ids = [txs[j].id for j in chosen]
    if current is not None and current not in ids:
        cur = next((j for j, t in enumerate(txs) if t.id == current), None)
        if cur is not None:
            chosen.append(cur)
            chosen.sort(key=lambda j: (d[j], txs[j].id))
    tx_ids = tuple(txs[j].id for j in chosen)
    keep = set(tx_ids)
    skip = set(exclude)
    members = tuple(pid for pid, tid in topology.edges.items()
                    if tid in keep and pid != outlier and pid not in skip)
    return CandidateSet(outlier, tx_ids, members, tuple(float(d[j]) for j in chosen))


def featurize(premises: Sequence[PremiseRecord], series: SeriesFrame) -> list[FeatureVector]:
    """Standardized ``[v_0..v_t, lat, lon]`` vectors for the given premises."""
    rows, ids = [], []
    for p in premises:
        if p.location is None or p.id not in series:
            log.warning("premise %s lacks location or series; excluded from features", p.id)
            continue
        v = np.array(series.voltage(p.id), dtype=float)
        ok = ~np.isnan(v)
        if not ok.any():
            log.warning("premise %s has no voltage samples; excluded from features", p.id)
            continue
        v[~ok] = v[ok].mean()
        rows.append(np.concatenate([v, [p.location.lat, p.location.lon]]))
        ids.append(p.id)
    if not rows:
        return []
    X = np.vstack(rows)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    Z = np.zeros_like(X)
    live = sd > 0
    Z[:, live] = (X[:, live] - mu[live]) / sd[live]
    return [FeatureVector(pid, Z[r]) for r, pid in enumerate(ids)]


# -- k-means -----------------------------------------------------------------

def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _means(X, labels, k, old):
    C = old.copy()
    for j in range(k):
        m = labels == j
        if m.any():
            C[j] = X[m].mean(axis=0)
    return C


def _objective(X, labels, C):
    return float(((X - C[labels]) ** 2).sum())


def _lloyd(X, k, rng, max_iter):
    C = _kmeanspp(X, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        new, d2 = kernels.lloyd_assign(X, C)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        sizes = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(sizes == 0):
            # reseed an empty cluster at the point farthest from its centroid
            donors = sizes[labels] > 1
            far = int(np.argmax(np.where(donors, d2, -1.0)))
            sizes[labels[far]] -= 1
            labels[far] = j
            sizes[j] = 1
            d2[far] = 0.0
            C[j] = X[far]
        C = _means(X, labels, k, C)
        history.append(_objective(X, labels, C))
    return labels, C, history


def _hartigan(X, labels, C, max_pass):
    """Single-point transfers that strictly lower the objective.

    Moving x from cluster a (size n_a > 1) to b changes the objective by
    n_b/(n_b+1)*|x-c_b|^2 - n_a/(n_a-1)*|x-c_a|^2. A state with no improving
    transfer is also a Lloyd fixed point, but Lloyd fixed points need not
    be transfer-stable; this pass escapes many of them.
    """
    k = C.shape[0]
    sizes = np.bincount(labels, minlength=k).astype(float)
    history = []
    for _ in range(max_pass):
        moved = False
        for i in range(X.shape[0]):
            a = labels[i]
            if sizes[a] <= 1:
                continue
            d2 = ((C - X[i]) ** 2).sum(axis=1)
            gain = sizes / (sizes + 1.0) * d2
            gain[a] = np.inf
            b = int(np.argmin(gain))
            loss = sizes[a] / (sizes[a] - 1.0) * d2[a]
            if gain[b] < loss * (1.0 - 1e-12):
                C[a] = (C[a] * sizes[a] - X[i]) / (sizes[a] - 1.0)
                C[b] = (C[b] * sizes[b] + X[i]) / (sizes[b] + 1.0)
                sizes[a] -= 1.0
                sizes[b] += 1.0
                labels[i] = b
                moved = True
        if not moved:
            break
        C = _means(X, labels, k, C)
        history.append(_objective(X, labels, C))
    return labels, C, history


def kmeans(points, k_clusters: int, seed: int = 0, n_init: int = N_INIT, max_iter: int = MAX_ITER) -> KMeansResult:
    """k-means++ seeds, Lloyd iterations, then single-point transfer refinement.

    Best objective over ``n_init`` restarts with sub-seeds spawned from ``seed``.
    """
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], FeatureVector):
        X = np.vstack([p.values for p in points])
    else:
        X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0] if X.size else 0
    if k_clusters < 1:
        raise StructuralError("k_clusters must be at least 1")
    if n < k_clusters:
        raise StructuralError(f"{n} points cannot form {k_clusters} clusters")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        labels, C, hist = _lloyd(X, k_clusters, np.random.default_rng(child), max_iter)
        labels, C, more = _hartigan(X, labels, C, max_iter)
        hist = hist + more
        obj = _objective(X, labels, C)
        if best is None or obj < best.inertia:
            best = KMeansResult(labels, C, obj, hist)
    return best


# -- pairing and reconnection -------------------------------------------------

def _tie_distance(topology, tid, lat, lon):
    loc = topology.transformers[tid].location
    return float(kernels.haversine_matrix([lat], [lon], [loc.lat], [loc.lon])[0, 0])


def pair_cluster_transformer(cluster: Sequence[str], candidates: CandidateSet, topology: Topology) -> Optional[str]:
    """Transformer serving most of the cluster's labeled members, or None.

    ``None`` signals a cluster with no labeled members (outlier alone).
    """
    members = [pid for pid in cluster if pid != candidates.outlier]
    counts = {tid: 0 for tid in candidates.transformers}
    for pid in members:
        tid = topology.edges.get(pid)
        if tid in counts:
            counts[tid] += 1
    top = max(counts.values(), default=0)
    if top == 0:
        return None
    tied = [tid for tid, c in counts.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    locs = [topology.premises[pid].location for pid in cluster if topology.premises[pid].location]
    lat = float(np.mean([g.lat for g in locs]))
    lon = float(np.mean([g.lon for g in locs]))
    return min(tied, key=lambda tid: (_tie_distance(topology, tid, lat, lon), tid))


def reconnect_kmeans(
    outlier: str,
    topology: Topology,
    series: SeriesFrame,
    k: int = DEFAULT_K,
    seed: int = 0,
    bins: int = DEFAULT_BINS,
    candidates: Optional[CandidateSet] = None,
) -> Reassignment:
    cands = candidates or build_candidates(outlier, topology, k)
    prem = [topology.premises[outlier]] + [topology.premises[p] for p in cands.premises]
    feats = featurize(prem, series)
    if not feats or feats[0].premise_id != outlier:
        raise UnresolvableError(f"outlier {outlier} has no usable voltage series")
    n_clusters = min(len(cands.transformers), len(feats))
    res = kmeans(feats, n_clusters, seed)
    c = int(res.labels[0])
    cluster = [f.premise_id for f, lab in zip(feats, res.labels) if lab == c]
    target = pair_cluster_transformer(cluster, cands, topology)
    if target is None:
        log.info("outlier %s isolated in its cluster; falling back to mutual information", outlier)
        return reconnect_mi(outlier, topology, series, k, bins, candidates=cands)
    return Reassignment(outlier, topology.edges[outlier], target, Method.KMEANS, c)


def mutual_information(x, y, bins: int = DEFAULT_BINS, min_overlap: int = MIN_OVERLAP, return_flag: bool = False):
    """Plug-in histogram MI in nats over pairwise-complete samples.

    With ``return_flag`` a ``(mi, degenerate)`` pair is returned, where
    ``degenerate`` marks a constant input.
    """
    if bins < 2:
        raise ValueError("bins must be at least 2")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = ~(np.isnan(x) | np.isnan(y))
    if m.sum() < min_overlap:
        raise ValueError(f"need {min_overlap} pairwise-complete samples, got {int(m.sum())}")
    mi, degenerate = kernels.hist_mi(x[m], y[m], bins)
    return (mi, degenerate) if return_flag else mi


def histogram_entropy(x, bins: int = DEFAULT_BINS) -> float:
    x = np.asarray(x, dtype=float)
    return float(kernels.hist_entropy(x[~np.isnan(x)], bins))


def rank_candidates_mi(
    outlier: str,
    topology: Topology,
    series: SeriesFrame,
    candidates: CandidateSet,
    bins: int = DEFAULT_BINS,
) -> list[tuple[str, float]]:
    """Candidate transformers ordered best-first by average MI with the outlier."""
    v = series.voltage(outlier)
    dist = dict(zip(candidates.transformers, candidates.distances_m))
    scored = []
    for tid in candidates.transformers:
        vals = []
        for pid in candidates.premises:
            if topology.edges.get(pid) != tid or pid not in series:
                continue
            try:
                vals.append(mutual_information(v, series.voltage(pid), bins))
            except ValueError:
                continue
        if vals:
            scored.append((tid, math.fsum(vals) / len(vals)))
    scored.sort(key=lambda s: (-s[1], dist.get(s[0], math.inf), s[0]))
    return scored


def reconnect_mi(
    outlier: str,
    topology: Topology,
    series: SeriesFrame,
    k: int = DEFAULT_K,
    bins: int = DEFAULT_BINS,
    candidates: Optional[CandidateSet] = None,
) -> Reassignment:
    cands = candidates or build_candidates(outlier, topology, k)
    if outlier not in series:
        raise UnresolvableError(f"outlier {outlier} has no voltage series")
    ranked = rank_candidates_mi(outlier, topology, series, cands, bins)
    if not ranked:
        raise UnresolvableError(f"no candidate transformer of {outlier} has usable premises")
    return Reassignment(outlier, topology.edges[outlier], ranked[0][0], Method.MUTUAL_INFORMATION)


def reconnect_all(
    outliers: Sequence[str],
    topology: Topology,
    series: SeriesFrame,
    k: int = DEFAULT_K,
    seed: int = 0,
    bins: int = DEFAULT_BINS,
    mode: str = "kmeans",
    workers: int = 1,
    exclude_flagged: bool = True,
) -> tuple[list[Reassignment], dict[str, CandidateSet], list[str]]:
    """Resolve every outlier against the same base topology.

    With ``exclude_flagged`` the other outliers are not used as labeled
    neighbours: a cluster of mislabeled intruders would otherwise take a
    cluster of its own and force two true groups to merge.

    Returns reassignments sorted by premise id, the candidate set used for
    each, and the ids that could not be resolved.
    """
    flagged = set(outliers) if exclude_flagged else set()

    def one(pid):
        try:
            cands = build_candidates(pid, topology, k, exclude=flagged - {pid})
            if mode == "mi":
                r = reconnect_mi(pid, topology, series, k, bins, candidates=cands)
            else:
                r = reconnect_kmeans(pid, topology, series, k, seed, bins, candidates=cands)
            return pid, r, cands
        except UnresolvableError as exc:
            log.warning("outlier %s unresolved: %s", pid, exc)
            return pid, None, None

    ids = sorted(set(outliers))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(pid) for pid in ids]
    out, cands, unresolved = [], {}, []
    for pid, r, c in results:
        if r is None:
            unresolved.append(pid)
        else:
            out.append(r)
            cands[pid] = c
    return out, cands, unresolved


def apply_reassignments(topology: Topology, reassignments: Sequence[Reassignment]) -> Topology:
    updates = {r.premise_id: r.new_transformer for r in sorted(reassignments, key=lambda r: r.premise_id)}
    return topology.with_edges(updates)


def write_reassignments_csv(reassignments: Sequence[Reassignment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REASSIGNMENT_COLUMNS)
        for r in reassignments:
            w.writerow([r.premise_id, r.old_transformer, r.new_transformer, r.method.value])
