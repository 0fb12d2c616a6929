import json

import pytest

from gridtopo import pipeline, synth
from gridtopo.errors import ConfigError, StageError


@pytest.fixture(scope="module")
def clean_dir(tmp_path_factory):
    b = synth.generate(synth.SynthConfig(n_transformers=6, corruption_fraction=0.0, seed=8))
    return b.to_dir(tmp_path_factory.mktemp("clean"))


def _cfg(d, **kw):
    return pipeline.PipelineConfig.for_bundle(d, truth=str(d / "truth.csv"), **kw)


def test_config_from_json_resolves_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(
        {"meters": "m.csv", "transformers": "t.csv", "series": "s.csv", "k": 3,
         "geocoder": {"backend": "offline", "table": "a.csv"}}))
    cfg = pipeline.PipelineConfig.from_json(tmp_path / "c.json")
    assert cfg.meters == str(tmp_path / "m.csv") and cfg.k == 3
    assert cfg.geocoder.table == str(tmp_path / "a.csv")


@pytest.mark.parametrize("d,msg", [
    ({"meters": "m", "transformers": "t"}, "series"),
    ({"meters": "m", "transformers": "t", "series": "s", "tau": 1.0}, "tau"),
    ({"meters": "m", "transformers": "t", "series": "s", "bogus": 1}, "bogus"),
    ({"meters": "m", "transformers": "t", "series": "s", "reconnect_mode": "spectral"}, "reconnect_mode"),
])
def test_config_schema_errors(d, msg):
    with pytest.raises(ConfigError, match=msg):
        pipeline.PipelineConfig.from_dict(d)


def test_config_semantic_errors(tmp_path):
    base = dict(meters="m", transformers="t", series="s")
    with pytest.raises(ConfigError):
        pipeline.PipelineConfig(**base, w_dbi=0.5, w_corr=0.6)
    with pytest.raises(ConfigError):
        pipeline.PipelineConfig(**base).with_overrides(nope=1)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        pipeline.PipelineConfig.from_json(tmp_path / "bad.json")


def test_canonical_json_nonfinite():
    assert pipeline.canonical_json({"b": float("inf"), "a": [float("nan"), 1.5]}) == \
        '{\n "a": [\n  null,\n  1.5\n ],\n "b": null\n}\n'


def test_clean_feeder_needs_nothing(clean_dir):
    rep = pipeline.run_pipeline(_cfg(clean_dir))
    s = rep.data["summary"]
    assert rep.data["reassignments"] == [] and s["n_changed"] == 0
    assert rep.data["violations"] == [] and rep.exit_code == 0
    assert rep.accuracy == 1.0 and rep.workdir is None


def test_stagewise_equals_monolithic(small_bundle_dir, tmp_path):
    cfg = _cfg(small_bundle_dir)
    mono = pipeline.run_pipeline(cfg, tmp_path / "mono")
    for name in pipeline.STAGES:
        pipeline.run_stage(name, cfg, tmp_path / "steps", upstream=False)
    steps = pipeline.RunReport.load(tmp_path / "steps" / "report.json")
    assert steps.to_json() == mono.to_json()
    assert (tmp_path / "mono" / "report.json").read_bytes() == (tmp_path / "steps" / "report.json").read_bytes()
    assert set(mono.timings) >= set(pipeline.STAGES)
    assert "timings" not in mono.data
    assert mono.accuracy >= mono.data["accuracy"]["base"]


def test_upstream_stages_run_on_demand(small_bundle_dir, tmp_path):
    pipeline.run_stage("detect", _cfg(small_bundle_dir), tmp_path)
    assert (tmp_path / "flags.csv").exists() and (tmp_path / "series_pu.npz").exists()
    assert not (tmp_path / "reassignments.csv").exists()


def test_deterministic_report(small_bundle_dir):
    a = pipeline.run_pipeline(_cfg(small_bundle_dir))
    b = pipeline.run_pipeline(_cfg(small_bundle_dir))
    assert a.to_json() == b.to_json()


def test_stage_error_keeps_artifacts(tmp_path, small_bundle_dir):
    cfg = pipeline.PipelineConfig.for_bundle(small_bundle_dir, series=str(tmp_path / "missing.csv"))
    with pytest.raises(StageError) as exc:
        pipeline.run_pipeline(cfg, tmp_path / "w")
    assert exc.value.stage == "ingest"
    with pytest.raises(ConfigError):
        pipeline.run_stage("nope", cfg, tmp_path / "w")


def test_overload_scenario_resolved(tmp_path):
    b = synth.generate_overload_scenario(synth.SynthConfig(n_transformers=9, seed=3))
    d = b.to_dir(tmp_path / "b")
    rep = pipeline.run_pipeline(_cfg(d))
    assert [v["subject"] for v in rep.data["violations_initial"] if v["measure"] == "peak_kw"] == ["X00001"]
    assert rep.data["violations"] == [] and rep.exit_code == 0
    assert rep.final_edges[b.manifest["overload"]["intruder"]] == b.manifest["overload"]["true_transformer"]
    norefine = pipeline.run_pipeline(_cfg(d, refine=False))
    assert norefine.exit_code == 3 and norefine.unresolved_transformers == ["X00001"]


def test_k_sensitivity_table(small_bundle_dir):
    rows = pipeline.k_sensitivity(_cfg(small_bundle_dir), ks=(2, 3))
    assert [r["k"] for r in rows] == [2, 3] and rows[0]["agreement_vs_k2"] == 1.0
    table = pipeline.format_table(rows)
    assert table.splitlines()[0].split() == list(rows[0])
