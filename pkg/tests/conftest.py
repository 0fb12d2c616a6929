from __future__ import annotations

import sys

import numpy as np
import pytest

from gridtopo import kernels, synth
from gridtopo.model import INTERVAL, GeoPoint, PhaseLabel, PremiseRecord, SeriesFrame, Topology, TransformerRecord

START = np.datetime64("2024-01-01T00:00:00", "s")


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    """Each available kernel implementation in turn."""
    return kernels.backends()[request.param]


@pytest.fixture(scope="session")
def small_bundle():
    return synth.generate(synth.SynthConfig(n_transformers=16, premises_per_transformer=(8, 12), seed=11))


@pytest.fixture(scope="session")
def small_bundle_dir(tmp_path_factory, small_bundle):
    return small_bundle.to_dir(tmp_path_factory.mktemp("bundle"))


def make_frame(ids, va, p=None, q=None, start=START):
    va = np.atleast_2d(np.asarray(va, dtype=float))
    ts = start + np.arange(va.shape[1]) * INTERVAL
    return SeriesFrame(ts, tuple(ids), va, None, None, p, q)


def toy_topology(premises, transformers, edges):
    """premises: {id: (lat, lon)}; transformers: {id: (lat, lon, kva)}."""
    prem = [PremiseRecord(pid, GeoPoint(*ll), nominal_voltage=240.0) for pid, ll in premises.items()]
    txs = [TransformerRecord(tid, GeoPoint(lat, lon), kva, PhaseLabel()) for tid, (lat, lon, kva) in transformers.items()]
    return Topology(prem, txs, edges)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)
