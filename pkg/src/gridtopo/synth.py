"""Synthetic feeders with known ground truth.

Voltage at premise i on transformer j is ``V_nom * (1 + a_j(t) + b_i(t))``:

* ``a_j = f + g_j``: ``f`` is a feeder-wide daily sinusoid plus AR(1) drift,
  ``g_j`` a transformer-specific AR(1) process;
* ``b_i`` is premise noise.

A static level per transformer and a smaller one per premise are added
on top; constants do not change any correlation.

Component variances are set from the correlation targets: with total
per-unit variance ``s2``, ``var f = inter*s2``, ``var g = (intra-inter)*s2``
and ``var b = (1-intra)*s2``. Components are orthogonalized against each
other on the sample so realized correlations sit close to the targets.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import ingest
from .errors import ConfigError
from .model import (
    INTERVAL,
    ConstraintSet,
    GeoPoint,
    PhaseLabel,
    PremiseRecord,
    SeriesFrame,
    Topology,
    TransformerRecord,
    diff_topologies,
)

METERS_PER_DEG = 6371008.8 * math.pi / 180.0
STANDARD_KVA = (10.0, 15.0, 25.0, 37.5, 50.0, 75.0, 100.0, 167.0, 250.0, 333.0, 500.0)
STEPS_PER_DAY = 96
MAX_WINDOW_DEG = 0.1


@dataclass(frozen=True)
class SynthConfig:
    n_transformers: int = 100
    premises_per_transformer: tuple = (10, 20)
    cluster_radius_m: float = 60.0
    n_steps: int = 672
    intra_corr_target: float = 0.95
    inter_corr_target: float = 0.6
    corruption_fraction: float = 0.2
    coord_jitter_m: float = 5.0
    seed: int = 0
    tx_spacing_m: float = 400.0
    origin: tuple = (32.90, -97.00)
    nominal_v: float = 240.0
    voltage_sd_pu: float = 0.01
    power_factor: float = 0.8
    start: str = "2024-06-03T00:00:00"
    missing_coord_fraction: float = 0.0
    extra_channels: bool = False

    def validate(self) -> "SynthConfig":
        lo, hi = self.premises_per_transformer
        if self.n_transformers < 1 or lo < 1 or hi < lo or self.n_steps < 1:
            raise ConfigError("counts must be positive and premises_per_transformer ordered")
        if not 0 < self.intra_corr_target < 1:
            raise ConfigError("intra_corr_target must lie in (0, 1)")
        if not 0 <= self.inter_corr_target < 1:
            raise ConfigError("inter_corr_target must lie in [0, 1)")
        if not self.inter_corr_target < self.intra_corr_target:
            raise ConfigError("inter_corr_target must be below intra_corr_target")
        if not 0 <= self.corruption_fraction < 1:
            raise ConfigError("corruption_fraction must lie in [0, 1)")
        if self.n_transformers < 2 and self.corruption_fraction > 0:
            raise ConfigError("corruption needs at least two transformers")
        if self.cluster_radius_m <= 0 or self.tx_spacing_m <= 0 or self.coord_jitter_m < 0:
            raise ConfigError("distances must be positive")
        cols = math.ceil(math.sqrt(self.n_transformers))
        if cols * self.tx_spacing_m * 1.3 / METERS_PER_DEG > MAX_WINDOW_DEG:
            raise ConfigError("feeder extent exceeds the 0.1 degree window; reduce spacing")
        return self

    def to_dict(self):
        d = asdict(self)
        d["premises_per_transformer"] = list(self.premises_per_transformer)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("premises_per_transformer", "origin"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(eq=False)
class SynthBundle:
    truth: Topology
    corrupted: Topology
    series: SeriesFrame
    constraints: ConstraintSet
    corruption_log: list
    addresses: dict = field(default_factory=dict)  # address -> true GeoPoint
    outages: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def to_dir(self, out) -> Path:
        """Write the four input CSVs, truth, the geocoder table and a manifest."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        ingest.write_meters(self.corrupted, out / "meters.csv")
        ingest.write_transformers(self.corrupted, out / "transformers.csv")
        ingest.write_series(self.series, out / "series.csv")
        ingest.write_outages(self.outages, out / "outages.csv")
        ingest.write_edges(self.truth, out / "truth.csv")
        with open(out / "addresses.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ingest.ADDRESS_COLUMNS)
            for addr, pt in sorted(self.addresses.items()):
                w.writerow([addr, repr(pt.lat), repr(pt.lon), "exact"])
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
        return out


def _offset(origin, east_m, north_m):
    lat0, lon0 = origin
    lat = lat0 + north_m / METERS_PER_DEG
    lon = lon0 + east_m / (METERS_PER_DEG * math.cos(math.radians(lat0)))
    return float(lat), float(lon)


def _ar1(rng, n, phi):
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi * phi)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def _standardize(x):
    x = x - x.mean()
    sd = x.std()
    return x / sd if sd > 0 else x


def _orthogonalize(x, basis):
    """Remove from x its sample projection on each (centered) basis vector."""
    x = x - x.mean()
    for b in basis:
        bb = float(b @ b)
        if bb > 0:
            x = x - (float(x @ b) / bb) * b
    return x


def _load_profile(rng, n):
    hours = (np.arange(n) % STEPS_PER_DAY) / 4.0
    base = rng.uniform(0.2, 0.6)
    peak = rng.uniform(1.0, 2.5)
    h_eve = rng.uniform(17.0, 21.0)
    h_morn = rng.uniform(6.0, 9.0)
    shape = np.exp(-0.5 * ((hours - h_eve) / 1.8) ** 2) + 0.4 * np.exp(-0.5 * ((hours - h_morn) / 1.2) ** 2)
    noise = 1.0 + 0.15 * rng.standard_normal(n)
    p = np.maximum(base + (peak - base) * shape * noise, 0.05)
    pf = rng.uniform(0.9, 0.98)
    return p, p * math.tan(math.acos(pf))


def _rating_for(peak_kw, peak_kva, pf, headroom=0.9):
    for r in STANDARD_KVA:
        if peak_kw <= r * pf * headroom and peak_kva <= r * headroom:
            return r
    return STANDARD_KVA[-1]


def _group_peaks(members, rows, P, Q):
    idx = [rows[p] for p in members]
    if not idx:
        return 0.0, 0.0
    return float(P[idx].sum(axis=0).max()), float(np.sqrt(P[idx] ** 2 + Q[idx] ** 2).sum(axis=0).max())


def _nearest_others(tx_xy, j, count):
    d = np.hypot(*(tx_xy - tx_xy[j]).T)
    d[j] = np.inf
    return [int(k) for k in np.argsort(d, kind="stable")[:count]]


def generate(config: SynthConfig) -> SynthBundle:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    n_tx = cfg.n_transformers
    T = cfg.n_steps

    # transformer layout: jittered square grid in local meters
    cols = math.ceil(math.sqrt(n_tx))
    grid = np.array([(k % cols, k // cols) for k in range(n_tx)], dtype=float) * cfg.tx_spacing_m
    tx_xy = grid + rng.uniform(-0.15, 0.15, size=(n_tx, 2)) * cfg.tx_spacing_m
    tx_ids = [f"X{k + 1:05d}" for k in range(n_tx)]

    # premises scattered in a disk around their transformer
    lo, hi = cfg.premises_per_transformer
    counts = rng.integers(lo, hi + 1, size=n_tx)
    prem_tx, prem_xy = [], []
    for j in range(n_tx):
        r = cfg.cluster_radius_m * np.sqrt(rng.uniform(size=counts[j]))
        th = rng.uniform(0, 2 * math.pi, size=counts[j])
        for a, b in zip(r, th):
            prem_tx.append(j)
            prem_xy.append(tx_xy[j] + (a * math.cos(b), a * math.sin(b)))
    n_p = len(prem_tx)
    prem_ids = [f"P{k + 1:06d}" for k in range(n_p)]
    prem_xy = np.array(prem_xy)
    recorded_xy = prem_xy + rng.normal(0.0, cfg.coord_jitter_m, size=prem_xy.shape) if cfg.coord_jitter_m else prem_xy
    no_coord = rng.uniform(size=n_p) < cfg.missing_coord_fraction

    # voltage components
    s2 = cfg.voltage_sd_pu ** 2
    var_f = cfg.inter_corr_target * s2
    var_g = (cfg.intra_corr_target - cfg.inter_corr_target) * s2
    var_b = (1.0 - cfg.intra_corr_target) * s2
    t = np.arange(T)
    daily = np.sin(2 * math.pi * t / STEPS_PER_DAY + rng.uniform(0, 2 * math.pi))
    f = _standardize(_standardize(daily) + _standardize(_ar1(rng, T, 0.95))) * math.sqrt(var_f)
    a = np.empty((n_tx, T))
    level = np.empty(n_tx)
    for j in range(n_tx):
        g = _standardize(_orthogonalize(_ar1(rng, T, 0.5), [f])) * math.sqrt(var_g)
        a[j] = f + g
        level[j] = rng.uniform(-0.01, 0.01)  # secondary voltage level, shared by the group
    V = np.empty((n_p, T))
    for i in range(n_p):
        aj = a[prem_tx[i]]
        b = _standardize(_orthogonalize(rng.standard_normal(T), [aj - aj.mean()])) * math.sqrt(var_b)
        V[i] = cfg.nominal_v * (1.0 + level[prem_tx[i]] + rng.normal(0.0, 0.001) + aj + b)

    # loads
    P = np.empty((n_p, T))
    Q = np.empty((n_p, T))
    for i in range(n_p):
        P[i], Q[i] = _load_profile(rng, T)

    rows = {pid: k for k, pid in enumerate(prem_ids)}
    members = {tx_ids[j]: [] for j in range(n_tx)}
    for i, j in enumerate(prem_tx):
        members[tx_ids[j]].append(prem_ids[i])

    txs = []
    for j, tid in enumerate(tx_ids):
        pk, ps = _group_peaks(members[tid], rows, P, Q)
        lat, lon = _offset(cfg.origin, *tx_xy[j])
        txs.append(TransformerRecord(tid, GeoPoint(lat, lon), _rating_for(pk, ps, cfg.power_factor), PhaseLabel()))

    premises, addresses = [], {}
    for i, pid in enumerate(prem_ids):
        addr = f"{i + 1} Grid Ave, Synthville"
        addresses[addr] = GeoPoint(*_offset(cfg.origin, *prem_xy[i]))
        loc = None if no_coord[i] else GeoPoint(*_offset(cfg.origin, *recorded_xy[i]))
        flags = {"needs_geocode"} if loc is None else set()
        premises.append(PremiseRecord(pid, loc, addr, PhaseLabel(), cfg.nominal_v, frozenset(flags)))

    truth_edges = {prem_ids[i]: tx_ids[prem_tx[i]] for i in range(n_p)}
    truth = Topology(premises, txs, truth_edges)

    # corruption: rewire to one of the 3 transformers nearest the true one
    m = math.ceil(cfg.corruption_fraction * n_p) if cfg.corruption_fraction > 0 else 0
    picked = sorted(rng.choice(n_p, size=m, replace=False).tolist()) if m else []
    updates = {}
    for i in picked:
        j = prem_tx[i]
        choices = _nearest_others(tx_xy, j, min(3, n_tx - 1))
        updates[prem_ids[i]] = tx_ids[choices[int(rng.integers(len(choices)))]]
    corrupted = truth.with_edges(updates)
    log = diff_topologies(truth, corrupted)

    chans = {"va": V}
    if cfg.extra_channels:
        chans["vb"] = V + rng.normal(0, math.sqrt(var_b), size=V.shape) * cfg.nominal_v
        chans["vc"] = V + rng.normal(0, math.sqrt(var_b), size=V.shape) * cfg.nominal_v
    start = np.datetime64(cfg.start, "s")
    series = SeriesFrame(start + np.arange(T) * INTERVAL, tuple(prem_ids),
                         chans.get("va"), chans.get("vb"), chans.get("vc"), P, Q)

    outages = []
    for _ in range(max(1, n_tx // 10)):
        j = int(rng.integers(n_tx))
        s = start + int(rng.integers(max(1, T - 8))) * INTERVAL
        e = s + int(rng.integers(1, 9)) * INTERVAL
        outages += [ingest.OutageRecord(pid, s, e) for pid in members[tx_ids[j]]]

    constraints = ConstraintSet(
        v_min=0.95 * cfg.nominal_v, v_max=1.05 * cfg.nominal_v, v_base=cfg.nominal_v,
        power_factor=cfg.power_factor,
    )
    manifest = {
        "config": cfg.to_dict(),
        "n_premises": n_p,
        "n_transformers": n_tx,
        "n_steps": T,
        "corruption_log": [list(e) for e in log],
    }
    return SynthBundle(truth, corrupted, series, constraints, log, addresses, outages, manifest)


def generate_overload_scenario(
    config: SynthConfig,
    rating_kva: float = 10.0,
    target_peak_kw: float = 11.32,
    truth_peak_fraction: float = 0.85,
    hide_intruder: bool = True,
) -> SynthBundle:
    """A clean feeder plus one mis-assigned premise that overloads its transformer.

    The first transformer gets ``rating_kva`` and its true group is scaled to
    ``truth_peak_fraction`` of the real-power limit. The premise of the
    nearest neighbouring transformer that lies closest to it is recorded on
    the first transformer, with its load scaled so that the recorded group
    peaks at exactly ``target_peak_kw``.

    With ``hide_intruder`` the intruder's recorded coordinates sit 45% of the
    way from the first transformer to its true one, so the distance test
    does not catch it and only the capacity check can.
    """
    base = generate(replace(config, corruption_fraction=0.0))
    pf = base.constraints.power_factor
    limit = rating_kva * pf
    if target_peak_kw <= limit:
        raise ConfigError(f"target peak {target_peak_kw} kW does not exceed the {limit} kW limit")
    topo = base.truth
    tx_ids = list(topo.transformers)
    t0 = tx_ids[0]
    loc0 = topo.transformers[t0].location
    others = [t for t in tx_ids[1:]]
    d = {t: _flat_dist(loc0, topo.transformers[t].location) for t in others}
    t1 = min(others, key=lambda t: (d[t], t))
    intruder = min(topo.members(t1), key=lambda p: (_flat_dist(loc0, topo.premises[p].location), p))

    series = base.series
    P = np.array(series.p_kw)
    Q = np.array(series.q_kvar)
    rows = {pid: k for k, pid in enumerate(series.ids)}
    g0 = [rows[p] for p in topo.members(t0)]
    scale = truth_peak_fraction * limit / P[g0].sum(axis=0).max()
    P[g0] *= scale
    Q[g0] *= scale
    group = P[g0].sum(axis=0)
    x = P[rows[intruder]].copy()
    c = brentq(lambda c: float((group + c * x).max()) - target_peak_kw, 0.0, 1e3 * target_peak_kw / x.max(),
               xtol=1e-14, rtol=4 * np.finfo(float).eps)
    P[rows[intruder]] *= c
    Q[rows[intruder]] *= c
    series = series.replace(p_kw=P, q_kvar=Q)

    members1 = topo.members(t1)
    pk1, ps1 = _group_peaks(members1, rows, P, Q)
    txs = [
        topo.transformers[t0].replace(rated_kva=float(rating_kva)),
        topo.transformers[t1].replace(rated_kva=_rating_for(pk1, ps1, pf)),
    ]
    truth = topo.with_transformers(txs)
    if hide_intruder:
        a, b = topo.transformers[t0].location, topo.transformers[t1].location
        spot = GeoPoint(a.lat + 0.45 * (b.lat - a.lat), a.lon + 0.45 * (b.lon - a.lon))
        truth = truth.with_premises([truth.premises[intruder].replace(location=spot)])
    corrupted = truth.with_edges({intruder: t0})
    log = diff_topologies(truth, corrupted)
    injected = float(P[[rows[p] for p in corrupted.members(t0)]].sum(axis=0).max())
    manifest = dict(base.manifest)
    manifest["corruption_log"] = [list(e) for e in log]
    manifest["overload"] = {
        "transformer": t0,
        "intruder": intruder,
        "true_transformer": t1,
        "rating_kva": float(rating_kva),
        "limit_kw": limit,
        "injected_peak_kw": injected,
        "truth_peak_kw": float(P[g0].sum(axis=0).max()),
    }
    return SynthBundle(truth, corrupted, series, base.constraints, log, base.addresses, base.outages, manifest)


def _flat_dist(a: GeoPoint, b: GeoPoint) -> float:
    dy = (a.lat - b.lat) * METERS_PER_DEG
    dx = (a.lon - b.lon) * METERS_PER_DEG * math.cos(math.radians(a.lat))
    return math.hypot(dx, dy)


def load_bundle(directory) -> SynthBundle:
    """Read a bundle written by ``SynthBundle.to_dir`` back through ``ingest``."""
    d = Path(directory)
    corrupted = ingest.load_topology(d / "meters.csv", d / "transformers.csv")
    truth = ingest.load_truth(d / "truth.csv", corrupted)
    series = ingest.load_series(d / "series.csv")
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = manifest.get("config", {})
    vn = cfg.get("nominal_v", 240.0)
    constraints = ConstraintSet(0.95 * vn, 1.05 * vn, vn, cfg.get("power_factor", 0.8))
    geo = ingest.OfflineGeocoder.from_csv(d / "addresses.csv")
    addresses = {a: pt for a, (pt, _) in geo.table.items()}
    outages = ingest.load_outages(d / "outages.csv")
    log = [tuple(e) for e in manifest.get("corruption_log", [])]
    return SynthBundle(truth, corrupted, series, constraints, log, addresses, outages, manifest)
