"""Loading and writing the CSV inputs, plus address geocoding.

File schemas (header row required, extra columns ignored)::

    meters.csv        ENDPOINTID,XFMR,LAT,LON,ADDRESS,PHASE,NOMINAL_V
    transformers.csv  XFMR,LAT,LON,RATED_KVA,PHASE
    series.csv        ENDPOINTID,TIMESTAMP,VA,VB,VC,P_KW,Q_KVAR
    outages.csv       PREMISE_ID,START,RESTORED
    addresses.csv     ADDRESS,LAT,LON,QUALITY   (offline geocoder table)

TIMESTAMP, START and RESTORED are RFC 3339; empty cells mean missing.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from . import kernels
from .errors import DataError, GeocodeTransportError, SchemaError, StructuralError
from .model import (
    INTERVAL,
    GeoPoint,
    PhaseLabel,
    PremiseRecord,
    SeriesFrame,
    Topology,
    TransformerRecord,
)

log = logging.getLogger(__name__)

METER_COLUMNS = ["ENDPOINTID", "XFMR", "LAT", "LON", "ADDRESS", "PHASE", "NOMINAL_V"]
TRANSFORMER_COLUMNS = ["XFMR", "LAT", "LON", "RATED_KVA", "PHASE"]
SERIES_COLUMNS = ["ENDPOINTID", "TIMESTAMP", "VA", "VB", "VC", "P_KW", "Q_KVAR"]
OUTAGE_COLUMNS = ["PREMISE_ID", "START", "RESTORED"]
ADDRESS_COLUMNS = ["ADDRESS", "LAT", "LON", "QUALITY"]
TRUTH_COLUMNS = ["ENDPOINTID", "XFMR"]

SNAP_TOLERANCE = np.timedelta64(60, "s")
DEFAULT_MAX_DISCREPANCY_M = 500.0
API_KEY_ENV = "GRIDTOPO_GEOCODER_KEY"


# -- helpers -----------------------------------------------------------------

def _read_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise SchemaError(path, col)
        return [{k: (v or "").strip() for k, v in row.items() if k is not None} for row in reader]


def _float(text) -> Optional[float]:
    if text is None or text == "":
        return None
    try:
        x = float(text)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _point(lat, lon) -> Optional[GeoPoint]:
    la, lo = _float(lat), _float(lon)
    if la is None or lo is None:
        return None
    try:
        return GeoPoint(la, lo)
    except DataError:
        return None


def _dupes(ids):
    seen, dup = set(), set()
    for i in ids:
        (dup if i in seen else seen).add(i)
    return sorted(dup)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def format_timestamp(ts) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


def parse_timestamp(text: str) -> np.datetime64:
    t = pd.Timestamp(text)
    if t.tzinfo is not None:
        t = t.tz_convert("UTC").tz_localize(None)
    return np.datetime64(t.to_datetime64(), "s")


# -- assets ------------------------------------------------------------------

def _read_meters(path):
    rows = _read_rows(path, METER_COLUMNS)
    dup = _dupes(r["ENDPOINTID"] for r in rows)
    if dup:
        raise DataError(f"{path}: duplicate ENDPOINTID values: {dup}")
    premises, edges = [], {}
    for r in rows:
        pid = r["ENDPOINTID"]
        if not pid:
            raise DataError(f"{path}: empty ENDPOINTID")
        loc = _point(r["LAT"], r["LON"])
        flags = frozenset() if loc is not None else frozenset({"needs_geocode"})
        nominal = _float(r["NOMINAL_V"])
        premises.append(PremiseRecord(
            pid, loc, r["ADDRESS"], PhaseLabel.parse(r["PHASE"]),
            nominal, flags,
        ))
        if r["XFMR"]:
            edges[pid] = r["XFMR"]
    return premises, edges


def _read_transformers(path):
    rows = _read_rows(path, TRANSFORMER_COLUMNS)
    dup = _dupes(r["XFMR"] for r in rows)
    if dup:
        raise DataError(f"{path}: duplicate XFMR values: {dup}")
    out = []
    for r in rows:
        rating = _float(r["RATED_KVA"])
        out.append(TransformerRecord(
            r["XFMR"], _point(r["LAT"], r["LON"]),
            rating if rating and rating > 0 else None, PhaseLabel.parse(r["PHASE"]),
        ))
    return out


def load_assets(meters_csv, transformers_csv) -> tuple[list[PremiseRecord], list[TransformerRecord]]:
    premises, _ = _read_meters(meters_csv)
    return premises, _read_transformers(transformers_csv)


def load_topology(meters_csv, transformers_csv) -> Topology:
    """Assets plus the recorded (base) premise -> transformer edges."""
    premises, edges = _read_meters(meters_csv)
    txs = _read_transformers(transformers_csv)
    try:
        return Topology(premises, txs, edges)
    except StructuralError as exc:
        raise DataError(f"{meters_csv}: {exc}") from None


def load_truth(path, base: Topology) -> Topology:
    rows = _read_rows(path, TRUTH_COLUMNS)
    return Topology(base.premises, base.transformers, {r["ENDPOINTID"]: r["XFMR"] for r in rows if r["XFMR"]})


def write_meters(topology: Topology, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METER_COLUMNS)
        for pid, p in topology.premises.items():
            loc = p.location
            w.writerow([
                pid, topology.edges.get(pid, ""),
                _num(loc.lat) if loc else "", _num(loc.lon) if loc else "",
                p.address, str(p.phase), _num(p.nominal_voltage),
            ])


def write_transformers(topology: Topology, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFORMER_COLUMNS)
        for tid, t in topology.transformers.items():
            loc = t.location
            w.writerow([tid, _num(loc.lat) if loc else "", _num(loc.lon) if loc else "",
                        _num(t.rated_kva), str(t.phase)])


def write_edges(topology: Topology, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for pid, tid in topology.edges.items():
            w.writerow([pid, tid])


# -- series ------------------------------------------------------------------

def load_series(series_csv, expected_interval=INTERVAL) -> SeriesFrame:
    """Load long-format series onto a common 15-minute grid.

    Timestamps within one minute of a grid point are snapped to it; rows
    may arrive in any order. Grid slots without a row are missing.
    """
    interval = np.timedelta64(expected_interval, "s")
    header = pd.read_csv(series_csv, nrows=0).columns
    for col in SERIES_COLUMNS:
        if col not in header:
            raise SchemaError(series_csv, col)
    df = pd.read_csv(
        series_csv,
        dtype={"ENDPOINTID": str, "TIMESTAMP": str},
        usecols=SERIES_COLUMNS,
        float_precision="round_trip",
        keep_default_na=False,
        na_values=[""],
    )
    if df.empty:
        return SeriesFrame.empty()
    try:
        ts = pd.to_datetime(df["TIMESTAMP"], utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{series_csv}: unparseable TIMESTAMP ({exc})") from None
    raw = ts.dt.tz_localize(None).to_numpy().astype("datetime64[s]")
    step = interval.astype(np.int64)
    secs = raw.astype(np.int64)
    snapped_secs = np.floor_divide(secs + step // 2, step) * step
    off = np.abs(secs - snapped_secs)
    bad = off > SNAP_TOLERANCE.astype(np.int64)
    if bad.any():
        offenders = sorted({format_timestamp(t) for t in raw[bad]})
        raise DataError(f"{series_csv}: timestamps off the {expected_interval} grid: {offenders[:10]}")
    df = df.assign(SNAPPED=snapped_secs)
    dup = df.duplicated(["ENDPOINTID", "SNAPPED"], keep=False)
    if dup.any():
        pairs = sorted({(r.ENDPOINTID, format_timestamp(np.datetime64(int(r.SNAPPED), "s")))
                        for r in df[dup].itertuples()})
        raise DataError(f"{series_csv}: duplicate (ENDPOINTID, TIMESTAMP) rows: {pairs[:10]}")
    t0, t1 = int(snapped_secs.min()), int(snapped_secs.max())
    n_steps = (t1 - t0) // step + 1
    grid = np.datetime64(t0, "s") + np.arange(n_steps) * interval
    ids = sorted(df["ENDPOINTID"].unique())
    row_of = {pid: k for k, pid in enumerate(ids)}
    r = df["ENDPOINTID"].map(row_of).to_numpy()
    c = ((df["SNAPPED"].to_numpy() - t0) // step).astype(np.int64)
    chans = {}
    for col, name in zip(SERIES_COLUMNS[2:], ("va", "vb", "vc", "p_kw", "q_kvar")):
        arr = np.full((len(ids), n_steps), np.nan)
        arr[r, c] = df[col].to_numpy(dtype=float)
        chans[name] = arr
    return SeriesFrame(grid, tuple(ids), **chans)


def write_series(series: SeriesFrame, path) -> None:
    n, T = len(series), series.n_steps
    stamps = np.array([format_timestamp(t) for t in series.timestamps], dtype=object)
    cols = [series.va, series.vb, series.vc, series.p_kw, series.q_kvar]
    stacked = np.stack(cols, axis=2).reshape(n * T, 5)
    keep = ~np.all(np.isnan(stacked), axis=1)
    df = pd.DataFrame(stacked, columns=SERIES_COLUMNS[2:])
    df.insert(0, "TIMESTAMP", np.tile(stamps, n))
    df.insert(0, "ENDPOINTID", np.repeat(np.array(series.ids, dtype=object), T))
    df[keep].to_csv(path, index=False, na_rep="", lineterminator="\n", float_format="%.17g")


# -- outages -----------------------------------------------------------------

@dataclass(frozen=True)
class OutageRecord:
    premise_id: str
    start: np.datetime64
    restored: np.datetime64

    def __post_init__(self):
        if self.restored < self.start:
            raise DataError(f"outage for {self.premise_id} restored before it started")


def load_outages(outages_csv) -> list[OutageRecord]:
    out = []
    for r in _read_rows(outages_csv, OUTAGE_COLUMNS):
        try:
            start, restored = parse_timestamp(r["START"]), parse_timestamp(r["RESTORED"])
        except ValueError as exc:
            raise DataError(f"{outages_csv}: bad timestamp ({exc})") from None
        out.append(OutageRecord(r["PREMISE_ID"], start, restored))
    return out


def write_outages(outages: Sequence[OutageRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTAGE_COLUMNS)
        for o in outages:
            w.writerow([o.premise_id, format_timestamp(o.start), format_timestamp(o.restored)])


# -- geocoding ---------------------------------------------------------------

class Quality(str, Enum):
    EXACT = "exact"
    INTERPOLATED = "interpolated"
    CENTROID = "centroid"
    FAILED = "failed"


@dataclass(frozen=True)
class GeocodeResult:
    point: Optional[GeoPoint]
    quality: Quality
    source: str

    def __post_init__(self):
        if (self.quality is Quality.FAILED) != (self.point is None):
            raise DataError("a geocode result has a point exactly when it did not fail")


class GeocoderClient(Protocol):
    def lookup(self, address: str) -> GeocodeResult: ...


class OfflineGeocoder:
    """Exact-match address table; the default backend for tests and CI."""

    source = "offline"

    def __init__(self, table: Optional[dict] = None):
        self.table = dict(table or {})
        self.calls = 0

    @classmethod
    def from_csv(cls, path) -> "OfflineGeocoder":
        table = {}
        for r in _read_rows(path, ADDRESS_COLUMNS):
            pt = _point(r["LAT"], r["LON"])
            if pt is not None:
                table[r["ADDRESS"]] = (pt, Quality(r["QUALITY"] or "exact"))
        return cls(table)

    def lookup(self, address: str) -> GeocodeResult:
        self.calls += 1
        hit = self.table.get(address)
        if hit is None:
            return GeocodeResult(None, Quality.FAILED, self.source)
        pt, q = hit if isinstance(hit, tuple) else (hit, Quality.EXACT)
        return GeocodeResult(pt, Quality(q), self.source)


class HttpGeocoder:
    """Generic HTTP backend: ``GET endpoint?address=...&format=json``.

    The response may be an object or a list of objects carrying ``lat`` and
    ``lon`` (strings or numbers) and optionally ``quality``. Requests are
    spaced to at most ``rate_limit`` per second.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, rate_limit: float = 1.0,
                 timeout: float = 10.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.min_gap = 1.0 / rate_limit if rate_limit > 0 else 0.0
        self.client = client or httpx.Client(timeout=timeout)
        self._lock = threading.Lock()
        self._last = -math.inf
        self.calls = 0
        self.source = f"http:{endpoint}"

    def _throttle(self):
        with self._lock:
            wait = self._last + self.min_gap - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def lookup(self, address: str) -> GeocodeResult:
        import httpx

        self._throttle()
        self.calls += 1
        params = {"address": address, "format": "json"}
        if self.api_key:
            params["key"] = self.api_key
        try:
            resp = self.client.get(self.endpoint, params=params)
        except httpx.TransportError as exc:
            raise GeocodeTransportError(f"geocoder unreachable: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise GeocodeTransportError(f"geocoder returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            return GeocodeResult(None, Quality.FAILED, self.source)
        body = resp.json()
        if isinstance(body, list):
            body = body[0] if body else {}
        pt = _point(body.get("lat"), body.get("lon")) if isinstance(body, dict) else None
        if pt is None:
            return GeocodeResult(None, Quality.FAILED, self.source)
        q = body.get("quality", "exact")
        return GeocodeResult(pt, Quality(q) if q in Quality._value2member_map_ else Quality.EXACT, self.source)


class CachingGeocoder:
    """Memoizes another client's answers, failures included."""

    def __init__(self, inner: GeocoderClient):
        self.inner = inner
        self.cache: dict[str, GeocodeResult] = {}
        self._lock = threading.Lock()

    @property
    def source(self):
        return getattr(self.inner, "source", "cached")

    def lookup(self, address: str) -> GeocodeResult:
        with self._lock:
            if address in self.cache:
                return self.cache[address]
        res = self.inner.lookup(address)
        with self._lock:
            self.cache.setdefault(address, res)
        return res


def geocode(address: str, client: GeocoderClient) -> GeocodeResult:
    if not address or not address.strip():
        raise ValueError("address must be non-empty")
    return client.lookup(address)


def refine_locations(
    premises: Sequence[PremiseRecord],
    client: GeocoderClient,
    max_discrepancy_m: float = DEFAULT_MAX_DISCREPANCY_M,
    workers: int = 1,
) -> list[PremiseRecord]:
    """Fill or correct premise coordinates from their geocoded addresses.

    Missing coordinates are filled; recorded coordinates farther than
    ``max_discrepancy_m`` from the geocoded point are replaced and the
    premise gains the ``relocated`` flag. Output order matches input.
    """
    todo = [p for p in premises if p.address]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip((p.id for p in todo), pool.map(lambda p: geocode(p.address, client), todo)))
    else:
        results = {p.id: geocode(p.address, client) for p in todo}
    out = []
    for p in premises:
        res = results.get(p.id)
        if res is None or res.point is None:
            out.append(p)
            continue
        if p.location is None:
            out.append(p.replace(location=res.point, flags=(p.flags - {"needs_geocode"}) | {"geocoded"}))
            continue
        d = float(kernels.haversine_matrix([p.location.lat], [p.location.lon],
                                           [res.point.lat], [res.point.lon])[0, 0])
        if d > max_discrepancy_m:
            out.append(p.replace(location=res.point, flags=p.flags | {"relocated"}))
        else:
            out.append(p)
    return out


def summarize_outages(outages: Sequence[OutageRecord]) -> dict:
    if not outages:
        return {"records": 0, "premises": 0}
    return {
        "records": len(outages),
        "premises": len({o.premise_id for o in outages}),
        "first_start": format_timestamp(min(o.start for o in outages)),
        "last_restored": format_timestamp(max(o.restored for o in outages)),
    }

