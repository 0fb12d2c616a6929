"""Time-series cleaning."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import DataError, UnresolvableError
from .model import ConstraintSet, PremiseRecord, SeriesFrame, Topology, VOLTAGE_CHANNELS

log = logging.getLogger(__name__)

IQR_K = 1.5
MIN_COMPLETENESS = 0.9
FLATLINE_EPS_PU = 1e-4
FLATLINE_WINDOW = 96
NEIGHBOR_FALLBACK = 10
# premises out of the voltage band for more than this share of samples are dropped
RANGE_DROP_FRACTION = 0.5


@dataclass
class CleaningReport:
    dropped_incomplete: list = field(default_factory=list)
    dropped_flatline: list = field(default_factory=list)
    dropped_range: list = field(default_factory=list)
    unresolved_nominal: list = field(default_factory=list)
    samples_removed_iqr: dict = field(default_factory=dict)
    inferred_nominal: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class IQRResult(NamedTuple):
    values: np.ndarray
    removed: int
    too_short: bool


def infer_nominal(premise: PremiseRecord, neighbors: Sequence[PremiseRecord]) -> float:
    """Most common nominal among neighbors; ties go to the nearest neighbor's value."""
    known = [n for n in neighbors if n.nominal_voltage is not None and n.id != premise.id]
    if not known:
        raise UnresolvableError(f"no neighbor of {premise.id} has a known nominal voltage")
    counts = Counter(n.nominal_voltage for n in known)
    top = max(counts.values())
    tied = {v for v, c in counts.items() if c == top}
    if len(tied) == 1:
        return float(tied.pop())
    cands = [n for n in known if n.nominal_voltage in tied]
    if premise.location is not None and all(n.location is not None for n in cands):
        d = kernels.haversine_matrix(
            [premise.location.lat], [premise.location.lon],
            [n.location.lat for n in cands], [n.location.lon for n in cands],
        )[0]
        order = sorted(range(len(cands)), key=lambda j: (d[j], cands[j].id))
        return float(cands[order[0]].nominal_voltage)
    return float(cands[0].nominal_voltage)


def neighbors_for(pid: str, topology: Topology, fallback: int = NEIGHBOR_FALLBACK) -> list[PremiseRecord]:
    """Same-transformer premises with a known nominal, else the nearest located ones."""
    tid = topology.edges.get(pid)
    same = [
        topology.premises[q] for q, t in topology.edges.items()
        if t == tid and q != pid and topology.premises[q].nominal_voltage is not None
    ]
    if same:
        return same
    p = topology.premises[pid]
    pool = [q for q in topology.premises.values()
            if q.id != pid and q.location is not None and q.nominal_voltage is not None]
    if p.location is None or not pool:
        return []
    d = kernels.haversine_matrix(
        [p.location.lat], [p.location.lon], [q.location.lat for q in pool], [q.location.lon for q in pool]
    )[0]
    order = sorted(range(len(pool)), key=lambda j: (d[j], pool[j].id))
    return [pool[j] for j in order[:fallback]]


def normalize_per_unit(series: SeriesFrame, nominals: Mapping[str, float]) -> SeriesFrame:
    scale = np.empty(len(series))
    for k, pid in enumerate(series.ids):
        if pid not in nominals:
            raise DataError(f"premise {pid} has no nominal voltage")
        vn = float(nominals[pid])
        if not vn > 0:
            raise DataError(f"premise {pid}: nominal voltage must be positive, got {vn}")
        scale[k] = vn
    return series.replace(**{ch: getattr(series, ch) / scale[:, None] for ch in VOLTAGE_CHANNELS})


def denormalize(series: SeriesFrame, nominals: Mapping[str, float]) -> SeriesFrame:
    scale = np.array([float(nominals[pid]) for pid in series.ids]).reshape(-1, 1)
    return series.replace(**{ch: getattr(series, ch) * scale for ch in VOLTAGE_CHANNELS})


def completeness(series: SeriesFrame, pid: str) -> float:
    if series.n_steps == 0:
        return 0.0
    return float(np.mean(~np.isnan(series.voltage(pid))))


def drop_incomplete(series: SeriesFrame, min_completeness: float = MIN_COMPLETENESS) -> tuple[SeriesFrame, list[str]]:
    if not 0 < min_completeness <= 1:
        raise ValueError("min_completeness must lie in (0, 1]")
    dropped = [pid for pid in series.ids if completeness(series, pid) < min_completeness]
    return series.drop(dropped), dropped


def iqr_filter(values, k: float = IQR_K) -> IQRResult:
    """Mask values outside the Tukey fences ``[Q1 - k*IQR, Q3 + k*IQR]``.

    Quartiles use linear interpolation between order statistics. The fence
    is re-applied until nothing more is removed, so the result is a fixed
    point of the filter. Fewer than four samples: returned unchanged with
    ``too_short`` set.
    """
    v = np.array(values, dtype=float)
    if np.count_nonzero(~np.isnan(v)) < 4:
        return IQRResult(v, 0, True)
    removed = 0
    while True:
        ok = ~np.isnan(v)
        if np.count_nonzero(ok) < 4:
            break
        q1, q3 = np.quantile(v[ok], [0.25, 0.75])
        lo, hi = q1 - k * (q3 - q1), q3 + k * (q3 - q1)
        out = ok & ((v < lo) | (v > hi))
        n = int(np.count_nonzero(out))
        if n == 0:
            break
        v[out] = np.nan
        removed += n
    return IQRResult(v, removed, False)


def iqr_filter_frame(series: SeriesFrame, k: float = IQR_K) -> tuple[SeriesFrame, dict[str, int]]:
    counts = {}
    chans = {}
    for ch in VOLTAGE_CHANNELS:
        arr = np.array(getattr(series, ch))
        for r, pid in enumerate(series.ids):
            if np.all(np.isnan(arr[r])):
                continue
            res = iqr_filter(arr[r], k)
            arr[r] = res.values
            counts[pid] = counts.get(pid, 0) + res.removed
        chans[ch] = arr
    return series.replace(**chans), counts


def flatline_filter(
    series: SeriesFrame,
    window: int = FLATLINE_WINDOW,
    epsilon_pu: float = FLATLINE_EPS_PU,
) -> tuple[SeriesFrame, list[str]]:
    """Drop premises whose per-unit voltage barely moves over the whole record."""
    if window < 2:
        raise ValueError("window must be at least 2")
    dropped = []
    for pid in series.ids:
        v = series.voltage(pid)
        v = v[~np.isnan(v)]
        if v.size < 2 or float(np.std(v, ddof=1)) < epsilon_pu:
            dropped.append(pid)
    return series.drop(dropped), dropped


def range_prescreen(
    series: SeriesFrame, nominals: Mapping[str, float], constraints: ConstraintSet,
    max_fraction: float = RANGE_DROP_FRACTION,
) -> list[str]:
    """Premises whose voltage sits outside the band most of the time (e.g. stuck below 100 V)."""
    lo, hi = constraints.band_pu()
    bad = []
    for pid in series.ids:
        v = series.voltage(pid) / nominals[pid]
        v = v[~np.isnan(v)]
        if v.size and np.mean((v < lo) | (v > hi)) > max_fraction:
            bad.append(pid)
    return bad


def resolve_nominals(topology: Topology, series: SeriesFrame, report: CleaningReport) -> dict[str, float]:
    nominals = {}
    for pid in series.ids:
        p = topology.premises.get(pid)
        if p is None:
            continue
        if p.nominal_voltage is not None:
            nominals[pid] = float(p.nominal_voltage)
            continue
        try:
            nominals[pid] = infer_nominal(p, neighbors_for(pid, topology))
            report.inferred_nominal[pid] = nominals[pid]
        except UnresolvableError as exc:
            log.warning("%s", exc)
            report.unresolved_nominal.append(pid)
    return nominals


def clean(
    topology: Topology,
    series: SeriesFrame,
    constraints: ConstraintSet,
    iqr_k: float = IQR_K,
    min_completeness: float = MIN_COMPLETENESS,
    flatline_eps: float = FLATLINE_EPS_PU,
) -> tuple[SeriesFrame, dict[str, float], CleaningReport]:
    """Full cleaning pass; returns the per-unit frame, nominals and the audit report."""
    report = CleaningReport()
    series = series.subset([pid for pid in series.ids if pid in topology.premises])
    nominals = resolve_nominals(topology, series, report)
    series = series.subset([pid for pid in series.ids if pid in nominals])
    report.dropped_range = range_prescreen(series, nominals, constraints)
    series = series.drop(report.dropped_range)
    series, report.dropped_incomplete = drop_incomplete(series, min_completeness)
    series, counts = iqr_filter_frame(series, iqr_k)
    report.samples_removed_iqr = {pid: counts[pid] for pid in sorted(counts) if counts[pid]}
    pu = normalize_per_unit(series, nominals)
    pu, report.dropped_flatline = flatline_filter(pu, epsilon_pu=flatline_eps)
    return pu, nominals, report
