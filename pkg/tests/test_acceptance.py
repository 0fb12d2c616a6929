"""Acceptance criteria, one test each, at their stated tolerances.

Every test appends a PASS/FAIL line to ``RESULTS``; the conftest hook prints
them at the end of the run. ``python3 tests/test_acceptance.py`` runs the
suite standalone.
"""
import math
import time

import numpy as np
import pytest

from gridtopo import confidence, detect, kernels, pipeline, reconnect, synth, validate
from gridtopo.model import ConstraintSet, GeoPoint

from conftest import make_frame, toy_topology
from test_reconnect import brute_force_2partition

RESULTS = []


def check(n, name, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {name}: {detail}")
    assert ok, detail


def _run(bundle, tmp_path, tag, **kw):
    d = bundle.to_dir(tmp_path / tag)
    cfg = pipeline.PipelineConfig.for_bundle(d, truth=str(d / "truth.csv"), **kw)
    t0 = time.perf_counter()
    rep = pipeline.run_pipeline(cfg)
    return rep, time.perf_counter() - t0, cfg


def test_c01_topology_recovery(tmp_path):
    accs, secs, sizes = [], [], []
    for seed in range(5):
        b = synth.generate(synth.SynthConfig(n_transformers=100, premises_per_transformer=(10, 18), seed=seed))
        rep, dt, _ = _run(b, tmp_path, f"s{seed}")
        accs.append(rep.accuracy)
        secs.append(dt)
        sizes.append(len(b.truth.premises))
    mean = float(np.mean(accs))
    check(1, "topology recovery", mean >= 0.95 and max(secs) < 60.0,
          f"mean accuracy {mean:.4f} over seeds 0-4 (per seed {[round(a, 4) for a in accs]}, "
          f"premises {sizes}), "
          f"slowest run {max(secs):.1f} s")


def test_c02_geographic_flagging():
    b = synth.generate(synth.SynthConfig(seed=0))
    true_loc = {p.id: b.addresses[p.address] for p in b.truth.premises.values()}
    txs = b.truth.transformers
    logged = {p for p, _, _ in b.corruption_log}

    def true_ratio(pid, tid):
        d = {t: detect.geodist(true_loc[pid], tx.location) for t, tx in txs.items()}
        return d[tid] / min(d.values())

    far = {p for p, _, new in b.corruption_log if true_ratio(p, new) > 3.0}
    flagged = {f.premise_id for f in detect.flag_geographic(b.corrupted, tau=3.0)}
    recall = len(flagged & far) / len(far)
    precision = len(flagged & logged) / len(flagged)
    check(2, "geographic flagging", recall >= 0.9 and precision >= 0.9,
          f"recall {recall:.4f} on {len(far)} corruptions with true ratio > 3, precision {precision:.4f}")


def _capacity(peak, kva):
    topo = toy_topology({"p": (0.0, 0.0)}, {"T": (0.0, 0.0, kva)}, {"p": "T"})
    series = make_frame(["p"], np.full((1, 3), 240.0), np.array([[0.5, peak, 1.0]]), np.zeros((1, 3)))
    return [v for v in validate.check_capacity(topo, series, ConstraintSet(power_factor=0.8))
            if v.measure == "peak_kw"]


def test_c03_capacity_table():
    a, b, c = _capacity(11.32, 10.0), _capacity(13.0, 15.0), _capacity(7.9, 10.0)
    ok = ([(v.limit, v.observed) for v in a] == [(8.0, 11.32)]
          and [(v.limit, v.observed) for v in b] == [(12.0, 13.0)] and c == [])
    check(3, "capacity rule", ok,
          f"10 kVA -> limit {a[0].limit if a else '-'} flags 11.32; 15 kVA -> limit {b[0].limit if b else '-'} "
          f"flags 13.0; 7.9 kW flagged: {bool(c)}")


def test_c04_confidence_arithmetic():
    sd = confidence.score_dbi(0.316, 0.955)
    sc = confidence.score_corr(0.991, 0.717)
    rng = np.random.default_rng(4)
    comp = max(abs(confidence.score_dbi(x, y) + confidence.score_dbi(y, x) - 1.0)
               for x, y in rng.uniform(1e-3, 10.0, size=(1000, 2)))
    g = np.linspace(0.0, 1.0, 100)
    L = np.array([[confidence.confidence_level(x, y) for y in g] for x in g])
    mono = bool(np.all(np.diff(L, axis=0) > 0) and np.all(np.diff(L, axis=1) > 0))
    ok = abs(sd - 0.7514) <= 1e-3 and abs(sc - 0.7993) <= 1e-3 and confidence.sigmoid(0.0) == 0.5 \
        and comp <= 1e-12 and mono
    check(4, "confidence arithmetic", ok,
          f"score_dbi {sd:.6f}, score_corr {sc:.6f}, sigmoid(0) {confidence.sigmoid(0.0)}, "
          f"max complement error {comp:.1e}, monotone {mono}")


def test_c05_estimators():
    rng = np.random.default_rng(5)
    worst_self, in_range = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(96, 400))
        x, y = rng.normal(size=(2, n)) * rng.uniform(0.01, 100.0)
        r = kernels.pearson_pair(x, y, 96)
        in_range &= -1.0 <= r <= 1.0
        worst_self = max(worst_self, abs(kernels.pearson_pair(x, x, 96) - 1.0))
    sym, nonneg, worst_h = True, True, 0.0
    for _ in range(200):
        x, y = rng.normal(size=(2, 500)) * rng.uniform(0.1, 10.0, size=(2, 1))
        a, b = reconnect.mutual_information(x, y), reconnect.mutual_information(y, x)
        sym &= a == b
        nonneg &= a >= 0.0
        worst_h = max(worst_h, abs(reconnect.mutual_information(x, x) - reconnect.histogram_entropy(x)))
    small = sum(reconnect.mutual_information(*rng.uniform(size=(2, 1000)), bins=16) < 0.15 for _ in range(200))
    ok = in_range and worst_self <= 1e-12 and sym and nonneg and worst_h <= 1e-12 and small >= 190
    check(5, "estimator suites", ok,
          f"pearson in range {in_range}, max |rho(x,x)-1| {worst_self:.1e}; MI symmetric {sym}, "
          f"non-negative {nonneg}, max |MI(x,x)-H| {worst_h:.1e}, independent < 0.15 in {small}/200")


def test_c06_kmeans_oracle():
    rng = np.random.default_rng(6)
    worst, fails = 0.0, 0
    for i in range(50):
        n, dim = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, dim))
        res = reconnect.kmeans(X, 2, seed=i, n_init=10)
        opt = brute_force_2partition(X)
        rel = (res.inertia - opt) / opt if opt > 0 else res.inertia
        worst = max(worst, rel)
        fails += rel > 1e-6
    check(6, "k-means oracle", fails == 0,
          f"{50 - fails}/50 instances at the exhaustive optimum, worst relative gap {worst:.1e}")


def test_c07_geodesic():
    rng = np.random.default_rng(7)
    pts = [GeoPoint(float(a), float(o)) for a, o in zip(rng.uniform(-89, 89, 60), rng.uniform(-180, 180, 60))]
    d = np.array([[detect.geodist(p, q) for q in pts] for p in pts])
    zero = bool(np.all(np.diag(d) == 0.0))
    sym = float(np.max(np.abs(d - d.T) / np.maximum(d, 1.0)))
    nonneg = bool(np.all(d >= 0))
    slack = d[:, None, :] - (d[:, :, None] + d[None, :, :])  # d(i,k) - d(i,j) - d(j,k)
    tri = float(np.max(slack / np.maximum(d[:, None, :], 1.0)))
    one = detect.geodist(GeoPoint(0.0, 0.0), GeoPoint(0.0, 1.0))
    ok = zero and nonneg and sym <= 1e-6 and tri <= 1e-6 and abs(one - 111195.0) <= 1.0
    check(7, "geodesic", ok,
          f"identity {zero}, symmetry gap {sym:.1e}, triangle excess {max(tri, 0.0):.1e}, "
          f"(0,0)-(0,1) = {one:.3f} m")


def test_c08_overload_refinement(tmp_path):
    outcomes = []
    for kva, peak in ((10.0, 11.32), (15.0, 13.0)):
        b = synth.generate_overload_scenario(synth.SynthConfig(n_transformers=16, seed=0), kva, peak)
        rep, _, _ = _run(b, tmp_path, f"o{int(kva)}")
        initial = {(v["subject"], v["measure"]) for v in rep.data["violations_initial"]}
        final = {(v["subject"], v["measure"]) for v in rep.data["violations"]}
        hit = ("X00001", "peak_kw") in initial
        cap_final = [v for v in rep.data["violations"] if v["kind"] == "capacity"]
        outcomes.append((kva, hit, len(cap_final), len(final - initial), rep.accuracy))
    ok = all(hit and nf == 0 and new == 0 for _, hit, nf, new, _ in outcomes)
    check(8, "overload refinement", ok, "; ".join(
        f"{kva:g} kVA: initial violation {hit}, final capacity violations {nf}, new {new}, accuracy {acc:.4f}"
        for kva, hit, nf, new, acc in outcomes))


def test_c09_determinism(tmp_path):
    b = synth.generate(synth.SynthConfig(n_transformers=36, seed=9))
    a, _, cfg = _run(b, tmp_path, "d")
    second = pipeline.run_pipeline(cfg)
    same = a.to_json().encode() == second.to_json().encode()
    check(9, "determinism", same, f"report JSON byte-identical across runs: {same} ({len(a.to_json())} bytes)")


def test_c10_k_sensitivity(tmp_path):
    b = synth.generate(synth.SynthConfig(n_transformers=36, seed=10))
    d = b.to_dir(tmp_path / "k")
    rows = pipeline.k_sensitivity(pipeline.PipelineConfig.for_bundle(d, truth=str(d / "truth.csv")), (2, 3, 4))
    table = pipeline.format_table(rows)
    agree = {r["k"]: r["agreement_vs_k2"] for r in rows}
    ok = len(table.splitlines()) == 4 and agree[3] >= 0.95
    check(10, "k sensitivity", ok,
          f"agreement with K=2: K=3 {agree[3]:.4f}, K=4 {agree[4]:.4f}; "
          f"accuracy {[round(r['accuracy'], 4) for r in rows]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
