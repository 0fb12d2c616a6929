"""Physical feasibility checks and overload refinement."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .confidence import membership_confidence
from .model import ConstraintSet, PremiseRecord, SeriesFrame, Topology, VOLTAGE_CHANNELS
from .reconnect import build_candidates, rank_candidates_mi
from .errors import UnresolvableError

log = logging.getLogger(__name__)

PERSISTENCE = 4  # consecutive samples (1 hour)
VIOLATION_COLUMNS = ["ID", "RATING_KVA", "PEAK_KW", "LIMIT_KW", "STATUS"]


class Kind(str, Enum):
    CAPACITY = "capacity"
    VOLTAGE_RANGE = "voltage_range"


@dataclass(frozen=True)
class Violation:
    subject: str  # transformer id (capacity) or premise id (voltage)
    kind: Kind
    measure: str  # "peak_kw", "peak_kva" or "voltage_v"
    observed: float
    limit: float
    rating_kva: Optional[float] = None
    timestamps: tuple = ()

    @property
    def magnitude(self) -> float:
        return abs(self.observed - self.limit)

    def to_dict(self):
        return {
            "subject": self.subject, "kind": self.kind.value, "measure": self.measure,
            "observed": self.observed, "limit": self.limit, "rating_kva": self.rating_kva,
            "timestamps": list(self.timestamps),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["subject"], Kind(d["kind"]), d["measure"], d["observed"], d["limit"],
                   d.get("rating_kva"), tuple(d.get("timestamps", ())))


@dataclass(frozen=True, eq=False)
class AggregatePower:
    kva: np.ndarray
    coverage: np.ndarray  # fraction of group members reporting at each step


@dataclass
class RefineResult:
    topology: Topology
    moves: list = field(default_factory=list)  # (premise, from, to)
    unresolved: list = field(default_factory=list)  # transformer ids


def _rows(group, series):
    return [series.index(p) for p in group if p in series]


def aggregate_apparent_power(group: Sequence[str], series: SeriesFrame) -> AggregatePower:
    """Per-step sum of sqrt(P^2 + Q^2); missing member samples count as zero."""
    T = series.n_steps
    if not len(group):
        return AggregatePower(np.zeros(T), np.ones(T))
    rows = _rows(group, series)
    P = series.p_kw[rows]
    Q = series.q_kvar[rows]
    S = np.sqrt(P * P + Q * Q)
    present = ~np.isnan(S)
    kva = np.where(present, S, 0.0).sum(axis=0)
    return AggregatePower(kva, present.sum(axis=0) / len(group))


def aggregate_real_power(group: Sequence[str], series: SeriesFrame) -> np.ndarray:
    rows = _rows(group, series)
    if not rows:
        return np.zeros(series.n_steps)
    return np.nansum(series.p_kw[rows], axis=0)


def _iso(ts):
    return [str(t) + "Z" for t in ts]


def transformer_load(group, series):
    """(peak real power kW, peak apparent power kVA) of a premise group."""
    if not len(group):
        return 0.0, 0.0
    return float(aggregate_real_power(group, series).max()), float(aggregate_apparent_power(group, series).kva.max())


def check_capacity(topology: Topology, series: SeriesFrame, constraints: ConstraintSet) -> list[Violation]:
    out = []
    members: dict[str, list[str]] = {}
    for pid, tid in topology.edges.items():
        members.setdefault(tid, []).append(pid)
    for tid, tx in topology.transformers.items():
        rating = constraints.rating(tx)
        if rating is None:
            log.warning("transformer %s has no rating; capacity check skipped", tid)
            continue
        group = members.get(tid, [])
        if not group:
            continue
        limit_kw = rating * constraints.power_factor
        p = aggregate_real_power(group, series)
        peak = float(p.max())
        if peak > limit_kw:
            out.append(Violation(tid, Kind.CAPACITY, "peak_kw", peak, limit_kw, rating,
                                 tuple(_iso(series.timestamps[p > limit_kw]))))
        s = aggregate_apparent_power(group, series).kva
        if float(s.max()) > rating:
            out.append(Violation(tid, Kind.CAPACITY, "peak_kva", float(s.max()), rating, rating,
                                 tuple(_iso(series.timestamps[s > rating]))))
    return out


def _runs(mask):
    """(start, stop) of every run of True values."""
    if not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2], edges[1::2]))


def check_voltage_range(
    series: SeriesFrame,
    premises: Iterable[PremiseRecord] | Mapping[str, PremiseRecord],
    constraints: ConstraintSet,
    persistence: int = PERSISTENCE,
    per_unit: bool = False,
) -> list[Violation]:
    """Premises whose voltage stays outside the band for ``persistence`` samples or more.

    Bounds scale with each premise's nominal voltage. Pass ``per_unit=True``
    when the frame is already normalized.
    """
    if isinstance(premises, Mapping):
        premises = premises.values()
    nominal = {p.id: p.nominal_voltage for p in premises}
    lo_pu, hi_pu = constraints.band_pu()
    out = []
    for pid in series.ids:
        vn = 1.0 if per_unit else nominal.get(pid)
        if vn is None:
            continue
        lo, hi = lo_pu * vn, hi_pu * vn
        for ch in VOLTAGE_CHANNELS:
            v = series.channel(ch, pid)
            if np.all(np.isnan(v)):
                continue
            with np.errstate(invalid="ignore"):
                low = v < lo
                high = v > hi
            for mask, limit, worst in ((low, lo, np.nanmin), (high, hi, np.nanmax)):
                runs = [(a, b) for a, b in _runs(mask) if b - a >= persistence]
                if runs:
                    idx = np.concatenate([np.arange(a, b) for a, b in runs])
                    out.append(Violation(pid, Kind.VOLTAGE_RANGE, f"voltage_{ch}",
                                         float(worst(v[idx])), float(limit), None,
                                         tuple(_iso(series.timestamps[idx]))))
    return out


def _feasible(group, series, rating, pf):
    peak_kw, peak_kva = transformer_load(group, series)
    return peak_kw <= rating * pf and peak_kva <= rating


def refine_overload(
    topology: Topology,
    violations: Sequence[Violation],
    confidence: Mapping[str, float],
    series: SeriesFrame,
    constraints: ConstraintSet,
    signal: Optional[SeriesFrame] = None,
    k: int = 2,
    bins: int = 16,
) -> RefineResult:
    """Relieve overloaded transformers by moving their least-trusted premises.

    Transformers are handled in decreasing order of overload. For each one,
    premises are tried from lowest confidence up; a premise moves to the
    best-ranked (by mutual information) other candidate transformer that
    stays within its limits after the move. ``series`` supplies loads and
    ``signal`` the (normalized) voltages used for ranking.
    """
    signal = signal if signal is not None else series
    pf = constraints.power_factor
    worst: dict[str, float] = {}
    for v in violations:
        if v.kind is Kind.CAPACITY:
            worst[v.subject] = max(worst.get(v.subject, 0.0), v.magnitude)
    order = sorted(worst, key=lambda t: (-worst[t], t))
    topo = topology
    moves, unresolved = [], []
    for tid in order:
        rating = constraints.rating(topo.transformers[tid])
        if rating is None:
            continue
        members = topo.members(tid)
        levels = {}
        for pid in members:
            if pid in confidence:
                levels[pid] = confidence[pid]
            else:
                b = membership_confidence(pid, topo, signal, k)
                levels[pid] = 1.0 if b is None else b.level
        queue = sorted(members, key=lambda p: (levels[p], p))
        while not _feasible(topo.members(tid), series, rating, pf):
            moved = False
            for pid in queue:
                try:
                    cands = build_candidates(pid, topo, k)
                except UnresolvableError:
                    continue
                ranked = [t for t, _ in rank_candidates_mi(pid, topo, signal, cands, bins) if t != tid]
                # transformers with no premises yet cannot be ranked; try them last by distance
                ranked += [t for t in cands.transformers if t != tid and t not in ranked]
                for target in ranked:
                    r_t = constraints.rating(topo.transformers[target])
                    if r_t is None:
                        continue
                    if _feasible(topo.members(target) + [pid], series, r_t, pf):
                        topo = topo.with_edges({pid: target})
                        moves.append((pid, tid, target))
                        queue.remove(pid)
                        moved = True
                        break
                if moved:
                    break
            if not moved:
                log.warning("transformer %s remains overloaded: no feasible move", tid)
                unresolved.append(tid)
                break
    return RefineResult(topo, moves, unresolved)


def write_violations_csv(violations: Sequence[Violation], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VIOLATION_COLUMNS)
        for v in violations:
            if v.kind is Kind.CAPACITY and v.measure == "peak_kw":
                w.writerow([v.subject, repr(v.rating_kva), repr(v.observed), repr(v.limit), "Violation"])


def write_violations_json(violations: Sequence[Violation], path) -> None:
    with open(path, "w") as fh:
        json.dump([v.to_dict() for v in violations], fh, indent=1)
