"""Domain types shared by every stage.

All types are immutable after construction. ``Topology`` and
``SeriesFrame`` are changed by building new values (``with_edges``,
``subset``, ``replace``), never in place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as _dc_replace
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, StructuralError

INTERVAL = np.timedelta64(15, "m")
VOLTAGE_CHANNELS = ("va", "vb", "vc")


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise DataError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class PhaseLabel:
    has_a: bool = True
    has_b: bool = False
    has_c: bool = False

    @classmethod
    def parse(cls, text: str) -> "PhaseLabel":
        text = (text or "").strip().upper()
        bad = set(text) - set("ABC")
        if bad:
            raise DataError(f"phase label {text!r} is not a subset of 'ABC'")
        return cls("A" in text, "B" in text, "C" in text)

    @property
    def energized(self) -> bool:
        return self.has_a or self.has_b or self.has_c

    def __str__(self):
        return "".join(p for p, on in zip("ABC", (self.has_a, self.has_b, self.has_c)) if on)


@dataclass(frozen=True)
class PremiseRecord:
    id: str
    location: Optional[GeoPoint] = None
    address: str = ""
    phase: PhaseLabel = PhaseLabel()
    nominal_voltage: Optional[float] = None
    # processing annotations, e.g. "needs_geocode", "relocated"
    flags: frozenset = frozenset()

    def __post_init__(self):
        if not self.id:
            raise DataError("premise id must be non-empty")
        if self.nominal_voltage is not None and not self.nominal_voltage > 0:
            raise DataError(f"premise {self.id}: nominal voltage must be positive")
        object.__setattr__(self, "flags", frozenset(self.flags))

    def replace(self, **changes) -> "PremiseRecord":
        return _dc_replace(self, **changes)


@dataclass(frozen=True)
class TransformerRecord:
    id: str
    location: Optional[GeoPoint]
    rated_kva: Optional[float]  # None = unknown rating
    phase: PhaseLabel = PhaseLabel()

    def __post_init__(self):
        if not self.id:
            raise DataError("transformer id must be non-empty")
        if self.rated_kva is not None and not self.rated_kva > 0:
            raise DataError(f"transformer {self.id}: rated_kva must be positive")

    def replace(self, **changes) -> "TransformerRecord":
        return _dc_replace(self, **changes)


@dataclass(frozen=True)
class ConstraintSet:
    """Physical limits used by validation.

    Voltage bounds are given in volts against ``v_base``; premises with a
    different nominal are checked against the same per-unit band.
    """

    v_min: float = 228.0
    v_max: float = 252.0
    v_base: float = 240.0
    power_factor: float = 0.8
    rated_kva: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.v_min < self.v_max):
            raise DataError(f"need 0 < v_min < v_max, got {self.v_min}, {self.v_max}")
        if not (0 < self.power_factor <= 1):
            raise DataError(f"power factor {self.power_factor} outside (0, 1]")
        if not self.v_base > 0:
            raise DataError("v_base must be positive")
        object.__setattr__(self, "rated_kva", MappingProxyType(dict(self.rated_kva)))

    def band_pu(self) -> tuple[float, float]:
        return self.v_min / self.v_base, self.v_max / self.v_base

    def rating(self, tx: TransformerRecord) -> Optional[float]:
        r = self.rated_kva.get(tx.id, tx.rated_kva)
        return None if r is None else float(r)


@dataclass(frozen=True, eq=False)
class Topology:
    """Bipartite premise -> transformer connectivity plus the asset records.

    ``edges`` maps premise id to transformer id. Premises absent from
    ``edges`` are known but unconnected.
    """

    premises: Mapping[str, PremiseRecord]
    transformers: Mapping[str, TransformerRecord]
    edges: Mapping[str, str]

    def __post_init__(self):
        prem = self.premises
        if not isinstance(prem, Mapping):
            prem = _index_unique(prem, "premise")
        txs = self.transformers
        if not isinstance(txs, Mapping):
            txs = _index_unique(txs, "transformer")
        edges = dict(sorted(self.edges.items()))
        for pid, tid in edges.items():
            if pid not in prem:
                raise StructuralError(f"edge from unknown premise {pid!r}")
            if tid not in txs:
                raise StructuralError(f"edge {pid!r} -> unknown transformer {tid!r}")
        object.__setattr__(self, "premises", MappingProxyType(dict(sorted(prem.items()))))
        object.__setattr__(self, "transformers", MappingProxyType(dict(sorted(txs.items()))))
        object.__setattr__(self, "edges", MappingProxyType(edges))

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            dict(self.edges) == dict(other.edges)
            and dict(self.premises) == dict(other.premises)
            and dict(self.transformers) == dict(other.transformers)
        )

    def with_edges(self, updates: Mapping[str, str]) -> "Topology":
        edges = dict(self.edges)
        edges.update(updates)
        return Topology(self.premises, self.transformers, edges)

    def with_premises(self, premises: Iterable[PremiseRecord]) -> "Topology":
        prem = dict(self.premises)
        for p in premises:
            prem[p.id] = p
        return Topology(prem, self.transformers, self.edges)

    def with_transformers(self, transformers: Iterable[TransformerRecord]) -> "Topology":
        txs = dict(self.transformers)
        for t in transformers:
            txs[t.id] = t
        return Topology(self.premises, txs, self.edges)

    def members(self, tx_id: str) -> list[str]:
        return [p for p, t in self.edges.items() if t == tx_id]


def _index_unique(records, kind):
    out = {}
    dupes = []
    for r in records:
        if r.id in out:
            dupes.append(r.id)
        out[r.id] = r
    if dupes:
        raise DataError(f"duplicate {kind} ids: {sorted(set(dupes))}")
    return out


def group_by_transformer(topology: Topology) -> dict[str, list[str]]:
    """Map every transformer id to the sorted ids of the premises it serves."""
    groups: dict[str, list[str]] = {tid: [] for tid in topology.transformers}
    for pid, tid in topology.edges.items():
        groups[tid].append(pid)
    return groups


def diff_topologies(a: Topology, b: Topology) -> list[tuple[str, Optional[str], Optional[str]]]:
    """Premises whose transformer differs between ``a`` and ``b``, sorted by id."""
    if set(a.premises) != set(b.premises):
        only_a = sorted(set(a.premises) - set(b.premises))
        only_b = sorted(set(b.premises) - set(a.premises))
        raise StructuralError(
            f"premise sets differ: {len(only_a)} only in first {only_a[:5]}, "
            f"{len(only_b)} only in second {only_b[:5]}"
        )
    out = []
    for pid in a.premises:
        ta, tb = a.edges.get(pid), b.edges.get(pid)
        if ta != tb:
            out.append((pid, ta, tb))
    return out


def accuracy(estimate: Topology, truth: Topology) -> float:
    n = len(truth.premises)
    if n == 0:
        return 1.0
    return 1.0 - len(diff_topologies(estimate, truth)) / n


@dataclass(frozen=True, eq=False)
class SeriesFrame:
    """Aligned 15-minute series for a set of premises.

    Every channel is an ``(n_premises, n_steps)`` float array; missing
    samples (and absent channels) are NaN.
    """

    timestamps: np.ndarray
    ids: tuple
    va: np.ndarray
    vb: np.ndarray
    vc: np.ndarray
    p_kw: np.ndarray
    q_kvar: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        ids = tuple(str(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate premise ids in series frame")
        if ts.size > 1:
            steps = np.diff(ts)
            if not np.all(steps == INTERVAL):
                raise DataError("series timestamps must be strictly increasing at 15-minute spacing")
        shape = (len(ids), ts.size)
        for name in VOLTAGE_CHANNELS + ("p_kw", "q_kvar"):
            arr = getattr(self, name)
            arr = np.full(shape, np.nan) if arr is None else np.array(arr, dtype=float)
            if arr.shape != shape:
                raise DataError(f"channel {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "_pos", {pid: k for k, pid in enumerate(ids)})

    @classmethod
    def empty(cls, timestamps=()) -> "SeriesFrame":
        return cls(np.asarray(timestamps, dtype="datetime64[s]"), (), None, None, None, None, None)

    @property
    def n_steps(self) -> int:
        return int(self.timestamps.size)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return pid in self._pos

    def index(self, pid: str) -> int:
        try:
            return self._pos[pid]
        except KeyError:
            raise KeyError(f"premise {pid!r} not in series frame") from None

    def channel(self, name: str, pid: str) -> np.ndarray:
        return getattr(self, name)[self.index(pid)]

    def primary_channel(self, pid: str) -> Optional[str]:
        """Phase A when it has data, else the first voltage channel that does."""
        k = self.index(pid)
        for name in VOLTAGE_CHANNELS:
            if not np.all(np.isnan(getattr(self, name)[k])):
                return name
        return None

    def voltage(self, pid: str) -> np.ndarray:
        name = self.primary_channel(pid)
        if name is None:
            return np.full(self.n_steps, np.nan)
        return getattr(self, name)[self.index(pid)]

    def voltage_matrix(self, ids: Sequence[str]) -> np.ndarray:
        if not len(ids):
            return np.empty((0, self.n_steps))
        return np.vstack([self.voltage(pid) for pid in ids])

    def subset(self, ids: Iterable[str]) -> "SeriesFrame":
        keep = [pid for pid in ids if pid in self._pos]
        rows = [self._pos[pid] for pid in keep]
        return SeriesFrame(
            self.timestamps,
            tuple(keep),
            *(getattr(self, n)[rows] for n in VOLTAGE_CHANNELS + ("p_kw", "q_kvar")),
        )

    def drop(self, ids: Iterable[str]) -> "SeriesFrame":
        gone = set(ids)
        return self.subset([pid for pid in self.ids if pid not in gone])

    def replace(self, **channels) -> "SeriesFrame":
        fields = {n: getattr(self, n) for n in VOLTAGE_CHANNELS + ("p_kw", "q_kvar")}
        fields.update(channels)
        return SeriesFrame(self.timestamps, self.ids, **fields)

    def equals(self, other: "SeriesFrame", atol: float = 0.0) -> bool:
        if self.ids != other.ids or not np.array_equal(self.timestamps, other.timestamps):
            return False
        for n in VOLTAGE_CHANNELS + ("p_kw", "q_kvar"):
            a, b = getattr(self, n), getattr(other, n)
            if not np.array_equal(np.isnan(a), np.isnan(b)):
                return False
            mask = ~np.isnan(a)
            if np.any(np.abs(a[mask] - b[mask]) > atol):
                return False
        return True
