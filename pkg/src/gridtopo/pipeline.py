"""End-to-end orchestration.

Every stage reads its inputs from and writes its outputs to a work
directory; the final report is always assembled from those artifacts.
Running the stages one by one therefore yields the same report as a single
``run_pipeline`` call.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import confidence as conf
from . import detect, ingest, preprocess, reconnect, validate
from .errors import ConfigError, GridTopoError, StageError
from .model import (
    ConstraintSet, GeoPoint, PhaseLabel, PremiseRecord, SeriesFrame, Topology, TransformerRecord,
    VOLTAGE_CHANNELS, accuracy,
)

log = logging.getLogger(__name__)

STAGES = ("ingest", "preprocess", "detect", "reconnect", "confidence", "validate", "refine", "report")
_OUTPUT = {
    "ingest": "ingest.json",
    "preprocess": "cleaning.json",
    "detect": "flags.json",
    "reconnect": "reassignments.json",
    "confidence": "confidence.json",
    "validate": "violations_initial.json",
    "refine": "refine.json",
    "report": "report.json",
}


@dataclass(frozen=True)
class GeocoderSettings:
    backend: str = "none"  # none | offline | http
    table: Optional[str] = None
    endpoint: Optional[str] = None
    rate_limit: float = 1.0
    timeout: float = 10.0
    max_discrepancy_m: float = ingest.DEFAULT_MAX_DISCREPANCY_M


@dataclass(frozen=True)
class PipelineConfig:
    meters: str
    transformers: str
    series: str
    outages: Optional[str] = None
    truth: Optional[str] = None
    tau: float = detect.DEFAULT_TAU
    epsilon: float = detect.DEFAULT_EPSILON
    min_overlap: int = detect.MIN_OVERLAP
    k: int = reconnect.DEFAULT_K
    mi_bins: int = reconnect.DEFAULT_BINS
    reconnect_mode: str = "kmeans"
    w_dbi: float = conf.W_DBI
    w_corr: float = conf.W_CORR
    review_threshold: float = conf.REVIEW_THRESHOLD
    power_factor: float = 0.8
    v_min: float = 228.0
    v_max: float = 252.0
    v_base: float = 240.0
    persistence: int = validate.PERSISTENCE
    iqr_k: float = preprocess.IQR_K
    min_completeness: float = preprocess.MIN_COMPLETENESS
    flatline_eps: float = preprocess.FLATLINE_EPS_PU
    refine: bool = True
    geocoder: GeocoderSettings = field(default_factory=GeocoderSettings)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.geocoder, dict):
            object.__setattr__(self, "geocoder", GeocoderSettings(**self.geocoder))
        self.validate()

    def validate(self) -> None:
        if not self.tau > 1:
            raise ConfigError(f"tau must exceed 1, got {self.tau}")
        if not -1 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.k < 2:
            raise ConfigError(f"k must be at least 2, got {self.k}")
        if self.mi_bins < 2:
            raise ConfigError("mi_bins must be at least 2")
        if self.min_overlap < 2:
            raise ConfigError("min_overlap must be at least 2")
        if self.reconnect_mode not in ("kmeans", "mi"):
            raise ConfigError(f"unknown reconnect_mode {self.reconnect_mode!r}")
        if min(self.w_dbi, self.w_corr) < 0 or abs(self.w_dbi + self.w_corr - 1.0) > 1e-9:
            raise ConfigError("confidence weights must be non-negative and sum to 1")
        if not 0 <= self.review_threshold <= 1:
            raise ConfigError("review_threshold must lie in [0, 1]")
        if not 0 < self.power_factor <= 1:
            raise ConfigError("power_factor must lie in (0, 1]")
        if not 0 < self.v_min < self.v_max or self.v_base <= 0:
            raise ConfigError("need 0 < v_min < v_max and v_base > 0")
        if self.persistence < 1 or self.workers < 1 or self.seed < 0:
            raise ConfigError("persistence and workers must be positive, seed non-negative")
        if not 0 < self.min_completeness <= 1 or self.iqr_k <= 0 or self.flatline_eps < 0:
            raise ConfigError("cleaning thresholds out of range")
        if self.geocoder.backend not in ("none", "offline", "http"):
            raise ConfigError(f"unknown geocoder backend {self.geocoder.backend!r}")
        if self.geocoder.backend == "offline" and not self.geocoder.table:
            raise ConfigError("offline geocoder needs a table path")
        if self.geocoder.backend == "http" and not self.geocoder.endpoint:
            raise ConfigError("http geocoder needs an endpoint")

    @property
    def constraints(self) -> ConstraintSet:
        return ConstraintSet(self.v_min, self.v_max, self.v_base, self.power_factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        validate_config_dict(d)
        d = dict(d)
        if base_dir is not None:
            for key in ("meters", "transformers", "series", "outages", "truth"):
                if d.get(key):
                    d[key] = str((Path(base_dir) / d[key]).resolve())
            geo = dict(d.get("geocoder") or {})
            if geo.get("table"):
                geo["table"] = str((Path(base_dir) / geo["table"]).resolve())
            d["geocoder"] = geo
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def for_bundle(cls, directory, **overrides) -> "PipelineConfig":
        """Config for a directory written by ``SynthBundle.to_dir``."""
        d = Path(directory)
        base = dict(
            meters=str(d / "meters.csv"), transformers=str(d / "transformers.csv"),
            series=str(d / "series.csv"),
            outages=str(d / "outages.csv") if (d / "outages.csv").exists() else None,
        )
        base.update(overrides)
        return cls(**base)


def config_schema() -> dict:
    return json.loads(resources.files("gridtopo").joinpath("config_schema.json").read_text())


def validate_config_dict(d: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(d, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None


# -- artifact serialization ---------------------------------------------------

def _finite(obj):
    """Recursively make an object JSON-safe: non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_finite(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _dump(obj, path):
    Path(path).write_text(canonical_json(obj))


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def _num(x):
    return None if x is None else float(x)


def topology_to_dict(topo: Topology) -> dict:
    return {
        "premises": [
            {"id": p.id, "lat": p.location.lat if p.location else None,
             "lon": p.location.lon if p.location else None, "address": p.address,
             "phase": str(p.phase), "nominal_voltage": p.nominal_voltage, "flags": sorted(p.flags)}
            for p in topo.premises.values()
        ],
        "transformers": [
            {"id": t.id, "lat": t.location.lat if t.location else None,
             "lon": t.location.lon if t.location else None, "rated_kva": t.rated_kva, "phase": str(t.phase)}
            for t in topo.transformers.values()
        ],
        "edges": dict(topo.edges),
    }


def _loc(d):
    return None if d["lat"] is None else GeoPoint(d["lat"], d["lon"])


def topology_from_dict(d: dict) -> Topology:
    prem = [PremiseRecord(p["id"], _loc(p), p["address"], PhaseLabel.parse(p["phase"]),
                          p["nominal_voltage"], frozenset(p["flags"])) for p in d["premises"]]
    txs = [TransformerRecord(t["id"], _loc(t), t["rated_kva"], PhaseLabel.parse(t["phase"]))
           for t in d["transformers"]]
    return Topology(prem, txs, d["edges"])


def save_series(series: SeriesFrame, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, timestamps=series.timestamps.astype("int64"), ids=np.array(series.ids, dtype=str),
                 **{n: getattr(series, n) for n in VOLTAGE_CHANNELS + ("p_kw", "q_kvar")})


def load_series_npz(path) -> SeriesFrame:
    with np.load(path, allow_pickle=False) as z:
        return SeriesFrame(z["timestamps"].astype("datetime64[s]"), tuple(str(i) for i in z["ids"]),
                           *(z[n] for n in VOLTAGE_CHANNELS + ("p_kw", "q_kvar")))


# -- stages -------------------------------------------------------------------

def _geocoder(settings: GeocoderSettings):
    if settings.backend == "offline":
        return ingest.CachingGeocoder(ingest.OfflineGeocoder.from_csv(settings.table))
    if settings.backend == "http":
        return ingest.CachingGeocoder(
            ingest.HttpGeocoder(settings.endpoint, rate_limit=settings.rate_limit, timeout=settings.timeout))
    return None


def stage_ingest(cfg: PipelineConfig, work: Path) -> None:
    topo = ingest.load_topology(cfg.meters, cfg.transformers)
    series = ingest.load_series(cfg.series)
    outages = ingest.load_outages(cfg.outages) if cfg.outages else []
    client = _geocoder(cfg.geocoder)
    if client is not None:
        refined = ingest.refine_locations(list(topo.premises.values()), client,
                                          cfg.geocoder.max_discrepancy_m, cfg.workers)
        topo = topo.with_premises(refined)
    missing = sorted(set(topo.premises) - set(series.ids))
    summary = {
        "n_premises": len(topo.premises),
        "n_transformers": len(topo.transformers),
        "n_edges": len(topo.edges),
        "n_series": len(series),
        "n_steps": series.n_steps,
        "start": ingest.format_timestamp(series.timestamps[0]) if series.n_steps else None,
        "end": ingest.format_timestamp(series.timestamps[-1]) if series.n_steps else None,
        "premises_without_series": missing,
        "geocoded": sorted(p.id for p in topo.premises.values() if "geocoded" in p.flags),
        "relocated": sorted(p.id for p in topo.premises.values() if "relocated" in p.flags),
        "needs_geocode": sorted(p.id for p in topo.premises.values() if "needs_geocode" in p.flags),
        "outages": ingest.summarize_outages(outages),
    }
    _dump(topology_to_dict(topo), work / "topology_base.json")
    save_series(series, work / "series_raw.npz")
    _dump(summary, work / "ingest.json")


def stage_preprocess(cfg: PipelineConfig, work: Path) -> None:
    topo = topology_from_dict(_load(work / "topology_base.json"))
    series = load_series_npz(work / "series_raw.npz")
    pu, nominals, report = preprocess.clean(
        topo, series, cfg.constraints, cfg.iqr_k, cfg.min_completeness, cfg.flatline_eps)
    save_series(pu, work / "series_pu.npz")
    _dump(nominals, work / "nominals.json")
    _dump(report.to_dict(), work / "cleaning.json")


def stage_detect(cfg: PipelineConfig, work: Path) -> None:
    topo = topology_from_dict(_load(work / "topology_base.json"))
    pu = load_series_npz(work / "series_pu.npz")
    geo = detect.flag_geographic(topo, cfg.tau)
    elec = detect.flag_electrical(topo, pu, cfg.epsilon, cfg.min_overlap)
    flags = detect.merge_flags(geo, elec)
    detect.write_flags_csv(flags, work / "flags.csv")
    _dump([f.to_dict() for f in flags], work / "flags.json")


def _flags(work):
    return [detect.OutlierFlag.from_dict(d) for d in _load(work / "flags.json")]


def stage_reconnect(cfg: PipelineConfig, work: Path) -> None:
    topo = topology_from_dict(_load(work / "topology_base.json"))
    pu = load_series_npz(work / "series_pu.npz")
    outliers = [f.premise_id for f in _flags(work)]
    rs, _, unresolved = reconnect.reconnect_all(
        outliers, topo, pu, cfg.k, cfg.seed, cfg.mi_bins, cfg.reconnect_mode, cfg.workers)
    reconnect.write_reassignments_csv(rs, work / "reassignments.csv")
    _dump({"reassignments": [r.to_dict() for r in rs], "unresolved": unresolved}, work / "reassignments.json")


def _reassignments(work):
    d = _load(work / "reassignments.json")
    return [reconnect.Reassignment.from_dict(r) for r in d["reassignments"]], d["unresolved"]


def stage_confidence(cfg: PipelineConfig, work: Path) -> None:
    topo = topology_from_dict(_load(work / "topology_base.json"))
    pu = load_series_npz(work / "series_pu.npz")
    rs, _ = _reassignments(work)
    flagged = {f.premise_id for f in _flags(work)}
    breakdowns = []
    for r in rs:
        cands = reconnect.build_candidates(r.premise_id, topo, cfg.k, exclude=flagged - {r.premise_id})
        breakdowns.append(conf.assess(r, cands, topo, pu, w_dbi=cfg.w_dbi, w_corr=cfg.w_corr))
    entries = conf.rank_report(breakdowns, cfg.review_threshold)
    conf.write_report_csv(entries, work / "confidence.csv")
    _dump([{**e.breakdown.to_dict(), "needs_review": e.needs_review} for e in entries], work / "confidence.json")


def _with_nominals(topo: Topology, nominals: dict) -> list[PremiseRecord]:
    return [p.replace(nominal_voltage=nominals[p.id]) if p.id in nominals else p for p in topo.premises.values()]


def stage_validate(cfg: PipelineConfig, work: Path) -> None:
    base = topology_from_dict(_load(work / "topology_base.json"))
    series = load_series_npz(work / "series_raw.npz")
    rs, _ = _reassignments(work)
    topo = reconnect.apply_reassignments(base, rs)
    nominals = _load(work / "nominals.json")
    cleaned = load_series_npz(work / "series_pu.npz").ids
    viol = validate.check_capacity(topo, series, cfg.constraints)
    viol += validate.check_voltage_range(series.subset(cleaned), _with_nominals(topo, nominals),
                                         cfg.constraints, cfg.persistence)
    _dump(topology_to_dict(topo), work / "topology_reconnected.json")
    _dump([v.to_dict() for v in viol], work / "violations_initial.json")


def stage_refine(cfg: PipelineConfig, work: Path) -> None:
    topo = topology_from_dict(_load(work / "topology_reconnected.json"))
    series = load_series_npz(work / "series_raw.npz")
    pu = load_series_npz(work / "series_pu.npz")
    viol = [validate.Violation.from_dict(v) for v in _load(work / "violations_initial.json")]
    levels = {d["premise_id"]: d["level"] for d in _load(work / "confidence.json") if d["level"] is not None}
    if cfg.refine and any(v.kind is validate.Kind.CAPACITY for v in viol):
        res = validate.refine_overload(topo, viol, levels, series, cfg.constraints, pu, cfg.k, cfg.mi_bins)
    else:
        res = validate.RefineResult(topo)
    final = validate.check_capacity(res.topology, series, cfg.constraints)
    final += [v for v in viol if v.kind is validate.Kind.VOLTAGE_RANGE]
    _dump(topology_to_dict(res.topology), work / "topology_final.json")
    _dump([v.to_dict() for v in final], work / "violations_final.json")
    _dump({"moves": [list(m) for m in res.moves], "unresolved": res.unresolved}, work / "refine.json")


def stage_report(cfg: PipelineConfig, work: Path) -> None:
    base = topology_from_dict(_load(work / "topology_base.json"))
    final = topology_from_dict(_load(work / "topology_final.json"))
    flags = _load(work / "flags.json")
    rs, unresolved = _reassignments(work)
    confs = {d["premise_id"]: d for d in _load(work / "confidence.json")}
    refine = _load(work / "refine.json")
    v0 = _load(work / "violations_initial.json")
    v1 = _load(work / "violations_final.json")
    reassign = []
    for r in rs:
        c = confs.get(r.premise_id)
        reassign.append({**r.to_dict(), "changed": r.changed,
                         "confidence": None if c is None else c["level"],
                         "needs_review": None if c is None else c["needs_review"],
                         "breakdown": c})
    cap_left = sorted({v["subject"] for v in v1 if v["kind"] == validate.Kind.CAPACITY.value})
    report = {
        "inputs": _load(work / "ingest.json"),
        "cleaning": _load(work / "cleaning.json"),
        "flags": flags,
        "reassignments": reassign,
        "unresolved_outliers": unresolved,
        "violations_initial": v0,
        "violations": v1,
        "refinement": refine,
        "topology": {"edges": dict(final.edges)},
        "summary": {
            "n_flags": len(flags),
            "n_reassignments": len(rs),
            "n_changed": sum(r.changed for r in rs),
            "n_needs_review": sum(1 for r in reassign if r["needs_review"]),
            "n_refine_moves": len(refine["moves"]),
            "n_violations_initial": len(v0),
            "n_violations_final": len(v1),
            "overloaded_transformers": cap_left,
            "edges_changed": len([1 for p in base.edges if base.edges[p] != final.edges.get(p)]),
        },
        "parameters": {k: v for k, v in cfg.to_dict().items()
                       if k not in ("meters", "transformers", "series", "outages", "truth", "workers")},
    }
    if cfg.truth:
        truth = ingest.load_truth(cfg.truth, base)
        report["accuracy"] = {"base": accuracy(base, truth), "final": accuracy(final, truth)}
    _dump(report, work / "report.json")


_STAGE_FN = {
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "detect": stage_detect,
    "reconnect": stage_reconnect,
    "confidence": stage_confidence,
    "validate": stage_validate,
    "refine": stage_refine,
    "report": stage_report,
}


def run_stage(name: str, cfg: PipelineConfig, workdir, upstream: bool = True) -> float:
    """Run one stage; with ``upstream`` first run any earlier stage whose output is missing."""
    if name not in _STAGE_FN:
        raise ConfigError(f"unknown stage {name!r}")
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    if upstream:
        for prev in STAGES[:STAGES.index(name)]:
            if not (work / _OUTPUT[prev]).exists():
                run_stage(prev, cfg, work, upstream=False)
    t0 = time.perf_counter()
    try:
        _STAGE_FN[name](cfg, work)
    except StageError:
        raise
    except (GridTopoError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc
    elapsed = time.perf_counter() - t0
    tpath = work / "timings.json"
    timings = _load(tpath) if tpath.exists() else {}
    timings[name] = elapsed
    tpath.write_text(json.dumps(timings, indent=1))
    log.info("stage %s finished in %.3f s", name, elapsed)
    return elapsed


@dataclass
class RunReport:
    data: dict
    timings: dict = field(default_factory=dict)
    workdir: Optional[str] = None

    def to_json(self) -> str:
        return canonical_json(self.data)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @property
    def accuracy(self) -> Optional[float]:
        acc = self.data.get("accuracy")
        return None if acc is None else acc["final"]

    @property
    def final_edges(self) -> dict:
        return self.data["topology"]["edges"]

    @property
    def unresolved_transformers(self) -> list:
        return self.data["summary"]["overloaded_transformers"]

    @property
    def exit_code(self) -> int:
        return 3 if self.unresolved_transformers else 0

    @classmethod
    def load(cls, path) -> "RunReport":
        path = Path(path)
        tpath = path.parent / "timings.json"
        return cls(_load(path), _load(tpath) if tpath.exists() else {}, str(path.parent))


def run_pipeline(cfg: PipelineConfig, workdir=None, emit_intermediate: bool = False) -> RunReport:
    """Run every stage in order.

    Intermediate artifacts are kept in ``workdir`` when given (or when
    ``emit_intermediate`` is set, in a fresh temporary directory). On
    failure the directory is always kept and named in the log.
    """
    keep = workdir is not None or emit_intermediate
    work = Path(workdir) if workdir is not None else Path(tempfile.mkdtemp(prefix="gridtopo-"))
    work.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        (work / _OUTPUT[name]).unlink(missing_ok=True)
    (work / "timings.json").unlink(missing_ok=True)
    try:
        for name in STAGES:
            run_stage(name, cfg, work, upstream=False)
    except StageError:
        log.error("partial artifacts kept in %s", work)
        raise
    report = RunReport.load(work / "report.json")
    report.timings["total"] = sum(report.timings.values())
    if not keep:
        shutil.rmtree(work, ignore_errors=True)
        report.workdir = None
    return report


def k_sensitivity(cfg: PipelineConfig, ks: Sequence[int] = (2, 3, 4), workdir=None) -> list[dict]:
    """Run the pipeline once per K and compare the reassignments with the first K.

    Agreement is the share of flagged premises sent to the same transformer.
    """
    runs = {}
    for k in ks:
        sub = None if workdir is None else Path(workdir) / f"k{k}"
        runs[k] = run_pipeline(cfg.with_overrides(k=k), sub)
    ref_k = ks[0]
    ref = {r["premise_id"]: r["new_transformer"] for r in runs[ref_k].data["reassignments"]}
    rows = []
    for k in ks:
        rep = runs[k]
        got = {r["premise_id"]: r["new_transformer"] for r in rep.data["reassignments"]}
        flagged = [f["premise_id"] for f in rep.data["flags"]]
        same = sum(1 for p in flagged if got.get(p) == ref.get(p))
        rows.append({
            "k": k,
            "n_reassignments": len(got),
            "n_changed": rep.data["summary"]["n_changed"],
            f"agreement_vs_k{ref_k}": same / len(flagged) if flagged else 1.0,
            "accuracy": rep.accuracy,
            "n_violations_final": rep.data["summary"]["n_violations_final"],
        })
    return rows


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
