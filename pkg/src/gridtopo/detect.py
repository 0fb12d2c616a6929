"""Outlier detection on the recorded topology.

Two independent tests are run against every premise -> transformer edge:

* geographic: the assigned transformer is more than ``tau`` times farther
  away than the nearest transformer;
* electrical: the premise's voltage is weakly correlated (below
  ``epsilon``) with every other premise on the same transformer.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from . import kernels
from .errors import UnresolvableError
from .model import GeoPoint, PremiseRecord, SeriesFrame, Topology, TransformerRecord, group_by_transformer

log = logging.getLogger(__name__)

DEFAULT_TAU = 3.0
DEFAULT_EPSILON = 0.5
MIN_OVERLAP = 96  # one day of 15-minute samples

FLAG_COLUMNS = ["PREMISE_ID", "XFMR", "NEAREST_XFMR", "DIST_M", "NEAREST_DIST_M", "RATIO", "REASON"]


class Reason(str, Enum):
    GEOGRAPHIC = "geographic"
    ELECTRICAL = "electrical"
    BOTH = "both"


@dataclass(frozen=True)
class OutlierFlag:
    premise_id: str
    current_transformer: str
    nearest_transformer: Optional[str]
    distance_m: float
    nearest_distance_m: float
    ratio: float
    reason: Reason

    def to_dict(self):
        d = asdict(self)
        d["reason"] = self.reason.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["premise_id"], d["current_transformer"], d["nearest_transformer"],
            float(d["distance_m"]), float(d["nearest_distance_m"]), float(d["ratio"]),
            Reason(d["reason"]),
        )


def geodist(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in meters."""
    return float(kernels.haversine_matrix([a.lat], [a.lon], [b.lat], [b.lon])[0, 0])


def pearson(x, y, min_overlap: int = MIN_OVERLAP) -> float:
    """Pearson correlation over pairwise-complete samples (NaN = no evidence)."""
    return float(kernels.pearson_pair(x, y, min_overlap))


def _located(txs: Iterable[TransformerRecord]) -> list[TransformerRecord]:
    return [t for t in txs if t.location is not None]


def nearest_transformer(p: PremiseRecord, txs: list[TransformerRecord]) -> tuple[str, float]:
    if p.location is None:
        raise UnresolvableError(f"premise {p.id} has no location")
    txs = sorted(_located(txs), key=lambda t: t.id)
    if not txs:
        raise UnresolvableError("no located transformers")
    d = kernels.haversine_matrix(
        [p.location.lat], [p.location.lon],
        [t.location.lat for t in txs], [t.location.lon for t in txs],
    )[0]
    k = int(np.argmin(d))  # first minimum = smallest id
    return txs[k].id, float(d[k])


def _ratio(d, dn):
    if dn > 0:
        return d / dn
    return 1.0 if d == 0 else math.inf


def distance_table(topology: Topology) -> dict[str, tuple[str, float, str, float, float]]:
    """Per connected, located premise: (assigned, d_assigned, nearest, d_nearest, ratio)."""
    txs = _located(topology.transformers.values())
    tx_ids = [t.id for t in txs]
    col = {tid: k for k, tid in enumerate(tx_ids)}
    pids = []
    for pid, tid in topology.edges.items():
        p = topology.premises[pid]
        if p.location is None:
            log.warning("premise %s has no location; skipped by geographic check", pid)
            continue
        if tid not in col:
            log.warning("transformer %s has no location; premise %s skipped", tid, pid)
            continue
        pids.append(pid)
    if not pids or not txs:
        return {}
    locs = [topology.premises[pid].location for pid in pids]
    D = kernels.haversine_matrix(
        [g.lat for g in locs], [g.lon for g in locs],
        [t.location.lat for t in txs], [t.location.lon for t in txs],
    )
    nearest = np.argmin(D, axis=1)
    out = {}
    for r, pid in enumerate(pids):
        tid = topology.edges[pid]
        d = float(D[r, col[tid]])
        k = int(nearest[r])
        dn = float(D[r, k])
        out[pid] = (tid, d, tx_ids[k], dn, _ratio(d, dn))
    return out


def flag_geographic(topology: Topology, tau: float = DEFAULT_TAU) -> list[OutlierFlag]:
    if not tau > 1:
        raise ValueError(f"tau must exceed 1, got {tau}")
    flags = []
    for pid, (tid, d, nid, dn, r) in distance_table(topology).items():
        if r > tau:
            flags.append(OutlierFlag(pid, tid, nid, d, dn, r, Reason.GEOGRAPHIC))
    return flags


def _group_members(topology: Topology, series: SeriesFrame) -> dict[str, list[str]]:
    return {
        tid: [p for p in members if p in series]
        for tid, members in group_by_transformer(topology).items()
    }


def electrical_skips(topology: Topology, series: SeriesFrame) -> list[str]:
    """Transformers whose group is too small to test electrically."""
    return [tid for tid, m in _group_members(topology, series).items() if len(m) == 1]


def flag_electrical(
    topology: Topology,
    series: SeriesFrame,
    epsilon: float = DEFAULT_EPSILON,
    min_overlap: int = MIN_OVERLAP,
) -> list[OutlierFlag]:
    geo = distance_table(topology)
    flags = []
    for tid, members in _group_members(topology, series).items():
        if len(members) < 2:
            continue
        R = kernels.pearson_matrix(series.voltage_matrix(members), min_overlap)
        for a, pid in enumerate(members):
            rho = np.delete(R[a], a)
            rho = rho[~np.isnan(rho)]
            if rho.size and np.all(rho < epsilon):
                _, d, nid, dn, r = geo.get(pid, (tid, math.nan, None, math.nan, math.nan))
                flags.append(OutlierFlag(pid, tid, nid, d, dn, r, Reason.ELECTRICAL))
    return sorted(flags, key=lambda f: f.premise_id)


def merge_flags(geo: list[OutlierFlag], elec: list[OutlierFlag]) -> list[OutlierFlag]:
    merged = {f.premise_id: f for f in elec}
    for f in geo:
        if f.premise_id in merged:
            merged[f.premise_id] = OutlierFlag(**{**f.__dict__, "reason": Reason.BOTH})
        else:
            merged[f.premise_id] = f
    return [merged[k] for k in sorted(merged)]


def _fmt(x: float, digits: int) -> str:
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf"
    return f"{x:.{digits}f}"


def write_flags_csv(flags: list[OutlierFlag], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLAG_COLUMNS)
        for f in flags:
            w.writerow([
                f.premise_id, f.current_transformer, f.nearest_transformer or "",
                _fmt(f.distance_m, 3), _fmt(f.nearest_distance_m, 3), _fmt(f.ratio, 6),
                f.reason.value,
            ])


def read_flags_csv(path) -> list[OutlierFlag]:
    def num(s):
        return math.nan if s == "" else float(s)

    with open(path, newline="") as fh:
        return [
            OutlierFlag(
                r["PREMISE_ID"], r["XFMR"], r["NEAREST_XFMR"] or None,
                num(r["DIST_M"]), num(r["NEAREST_DIST_M"]), num(r["RATIO"]), Reason(r["REASON"]),
            )
            for r in csv.DictReader(fh)
        ]


def write_flags_json(flags: list[OutlierFlag], path) -> None:
    with open(path, "w") as fh:
        json.dump([f.to_dict() for f in flags], fh, indent=1)


def read_flags_json(path) -> list[OutlierFlag]:
    with open(path) as fh:
        return [OutlierFlag.from_dict(d) for d in json.load(fh)]
