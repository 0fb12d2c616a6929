"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 capacity violations remain after refinement.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__, pipeline, synth
from .errors import ConfigError, DataError, GridTopoError, StageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_UNRESOLVED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_inputs(p):
    g = p.add_argument_group("inputs")
    g.add_argument("--config", help="pipeline config JSON")
    g.add_argument("--bundle", help="directory written by 'synth' (alternative to --config)")
    g.add_argument("--meters")
    g.add_argument("--transformers")
    g.add_argument("--series")
    g.add_argument("--outages")
    g.add_argument("--truth", help="ENDPOINTID,XFMR ground truth; adds accuracy to the report")
    g.add_argument("--work", default="work", help="artifact directory (default: ./work)")
    o = p.add_argument_group("overrides")
    o.add_argument("--tau", type=float)
    o.add_argument("--epsilon", type=float)
    o.add_argument("--k", type=int)
    o.add_argument("--bins", dest="mi_bins", type=int)
    o.add_argument("--mode", dest="reconnect_mode", choices=["kmeans", "mi"])
    o.add_argument("--pf", dest="power_factor", type=float)
    o.add_argument("--seed", type=int)
    o.add_argument("--workers", type=int)
    o.add_argument("--no-refine", dest="refine", action="store_const", const=False)


_OVERRIDES = ("tau", "epsilon", "k", "mi_bins", "reconnect_mode", "power_factor", "seed", "workers",
              "refine", "truth", "outages")


def _config(args) -> pipeline.PipelineConfig:
    direct = [args.meters, args.transformers, args.series]
    sources = sum([bool(args.config), bool(args.bundle), any(direct)])
    if sources != 1:
        raise ConfigError("give exactly one of --config, --bundle or --meters/--transformers/--series")
    overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if args.config:
        cfg = pipeline.PipelineConfig.from_json(args.config)
    elif args.bundle:
        cfg = pipeline.PipelineConfig.for_bundle(args.bundle)
    else:
        if not all(direct):
            raise ConfigError("--meters, --transformers and --series go together")
        cfg = pipeline.PipelineConfig(*direct)
    return cfg.with_overrides(**overrides)


def _copy(work: Path, name: str, out):
    if out:
        shutil.copyfile(work / name, out)


def cmd_synth(args):
    cfg = synth.SynthConfig(
        n_transformers=args.n_transformers,
        premises_per_transformer=(args.premises[0], args.premises[1]),
        n_steps=args.steps,
        intra_corr_target=args.intra,
        inter_corr_target=args.inter,
        corruption_fraction=args.corruption,
        seed=args.seed,
        extra_channels=args.extra_channels,
    )
    if args.overload:
        bundle = synth.generate_overload_scenario(cfg, args.rating_kva, args.target_peak_kw)
    else:
        bundle = synth.generate(cfg)
    out = bundle.to_dir(args.out)
    print(f"wrote {len(bundle.truth.premises)} premises, {len(bundle.truth.transformers)} transformers, "
          f"{len(bundle.corruption_log)} corrupted edges to {out}")
    return EXIT_OK


def _stage_cmd(stages, artifact=None):
    def run(args):
        cfg = _config(args)
        work = Path(args.work)
        for s in stages:
            pipeline.run_stage(s, cfg, work)
        if artifact:
            _copy(work, artifact, args.out)
            print(f"{artifact} written to {args.out or work / artifact}")
        if "refine" in stages:
            left = [v for v in pipeline._load(work / "violations_final.json") if v["kind"] == "capacity"]
            if left:
                print(f"unresolved capacity violations: {sorted({v['subject'] for v in left})}")
                return EXIT_UNRESOLVED
        return EXIT_OK
    return run


def cmd_pipeline(args):
    cfg = _config(args)
    if args.k_sweep:
        ks = [int(x) for x in args.k_sweep.split(",")]
        rows = pipeline.k_sensitivity(cfg, ks, args.work if args.emit_intermediate else None)
        print(pipeline.format_table(rows))
        return EXIT_OK
    report = pipeline.run_pipeline(cfg, args.work, args.emit_intermediate)
    if args.report:
        report.write(args.report)
    print(render_text(report))
    return report.exit_code


def render_text(report: pipeline.RunReport) -> str:
    d = report.data
    s = d["summary"]
    inp = d["inputs"]
    lines = [
        f"premises {inp['n_premises']}  transformers {inp['n_transformers']}  steps {inp['n_steps']}",
        f"cleaning: dropped incomplete {len(d['cleaning']['dropped_incomplete'])}, "
        f"flatline {len(d['cleaning']['dropped_flatline'])}, range {len(d['cleaning']['dropped_range'])}",
        f"flags {s['n_flags']}  reassignments {s['n_reassignments']} (changed {s['n_changed']}, "
        f"needs review {s['n_needs_review']})",
        f"violations initial {s['n_violations_initial']}  final {s['n_violations_final']}  "
        f"refine moves {s['n_refine_moves']}",
    ]
    if s["overloaded_transformers"]:
        lines.append(f"overloaded transformers: {', '.join(s['overloaded_transformers'])}")
    if "accuracy" in d:
        lines.append(f"accuracy: base {d['accuracy']['base']:.4f}  final {d['accuracy']['final']:.4f}")
    low = sorted((r for r in d["reassignments"] if r["confidence"] is not None),
                 key=lambda r: (r["confidence"], r["premise_id"]))[:5]
    if low:
        lines.append("lowest confidence:")
        lines += [f"  {r['premise_id']}  {r['old_transformer']} -> {r['new_transformer']}  {r['confidence']:.3f}"
                  for r in low]
    if report.timings:
        lines.append("timings: " + "  ".join(f"{k} {v:.2f}s" for k, v in report.timings.items()))
    return "\n".join(lines)


def render_plots(work: Path, out: Path, max_overlays: int = 4) -> list[Path]:
    """Map scatter of the final topology and voltage overlays for changed premises."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out.mkdir(parents=True, exist_ok=True)
    report = pipeline._load(work / "report.json")
    topo = pipeline.topology_from_dict(pipeline._load(work / "topology_final.json"))
    written = []

    fig, ax = plt.subplots(figsize=(7, 7))
    tx = [t for t in topo.transformers.values() if t.location]
    prem = [p for p in topo.premises.values() if p.location]
    ax.scatter([p.location.lon for p in prem], [p.location.lat for p in prem], s=4, c="0.6", label="premise")
    ax.scatter([t.location.lon for t in tx], [t.location.lat for t in tx], s=30, marker="^", c="k",
               label="transformer")
    for r in report["reassignments"]:
        if not r["changed"]:
            continue
        p = topo.premises[r["premise_id"]].location
        for tid, style in ((r["old_transformer"], "r--"), (r["new_transformer"], "g-")):
            t = topo.transformers[tid].location
            if p and t:
                ax.plot([p.lon, t.lon], [p.lat, t.lat], style, lw=0.8)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.legend(loc="best")
    path = out / "map.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    pu = pipeline.load_series_npz(work / "series_pu.npz")
    base = pipeline.topology_from_dict(pipeline._load(work / "topology_base.json"))
    changed = sorted((r for r in report["reassignments"] if r["changed"] and r["premise_id"] in pu),
                     key=lambda r: (r["confidence"] if r["confidence"] is not None else 1.0, r["premise_id"]))
    hours = np.arange(pu.n_steps) / 4.0
    for r in changed[:max_overlays]:
        fig, ax = plt.subplots(figsize=(9, 3.5))
        for tid, color in ((r["old_transformer"], "tab:red"), (r["new_transformer"], "tab:green")):
            for q in [q for q in base.members(tid) if q in pu and q != r["premise_id"]][:8]:
                ax.plot(hours, pu.voltage(q), color=color, lw=0.4, alpha=0.5)
        ax.plot(hours, pu.voltage(r["premise_id"]), color="k", lw=1.0, label=r["premise_id"])
        ax.set_title(f"{r['premise_id']}: {r['old_transformer']} (red) -> {r['new_transformer']} (green)")
        ax.set_xlabel("hours")
        ax.set_ylabel("voltage (p.u.)")
        fig.tight_layout()
        path = out / f"overlay_{r['premise_id']}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args):
    work = Path(args.work)
    path = Path(args.report) if args.report else work / "report.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'pipeline' first")
    report = pipeline.RunReport.load(path)
    print(render_text(report))
    if args.plots:
        for p in render_plots(path.parent, Path(args.plots), args.max_overlays):
            print(f"plot {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridtopo", description="Premise-to-transformer topology correction from meter data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic feeder bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-transformers", type=int, default=100)
    s.add_argument("--premises", type=int, nargs=2, default=(10, 20), metavar=("MIN", "MAX"))
    s.add_argument("--steps", type=int, default=672)
    s.add_argument("--intra", type=float, default=0.95)
    s.add_argument("--inter", type=float, default=0.6)
    s.add_argument("--corruption", type=float, default=0.2)
    s.add_argument("--extra-channels", action="store_true")
    s.add_argument("--overload", action="store_true", help="clean feeder plus one injected overload")
    s.add_argument("--rating-kva", type=float, default=10.0)
    s.add_argument("--target-peak-kw", type=float, default=11.32)
    s.set_defaults(func=cmd_synth)

    for name, stages, artifact, help_ in (
        ("ingest", ["ingest", "preprocess"], "cleaning.json", "load, geocode and clean inputs"),
        ("detect", ["detect"], "flags.csv", "flag geographic and electrical outliers"),
        ("reconnect", ["reconnect"], "reassignments.csv", "reassign flagged premises"),
        ("confidence", ["confidence"], "confidence.csv", "score reassignments"),
        ("validate", ["validate", "refine"], "violations_final.json", "check limits and relieve overloads"),
    ):
        c = sub.add_parser(name, help=help_)
        _add_inputs(c)
        c.add_argument("--out", help=f"copy {artifact} here")
        c.set_defaults(func=_stage_cmd(stages, artifact))

    c = sub.add_parser("pipeline", help="run every stage")
    _add_inputs(c)
    c.add_argument("--report", help="write the report JSON here")
    c.add_argument("--emit-intermediate", action="store_true", help="keep stage artifacts in --work")
    c.add_argument("--k-sweep", help="comma-separated K values, e.g. 2,3,4; prints a comparison table")
    c.set_defaults(func=cmd_pipeline)

    r = sub.add_parser("report", help="render a report as text and plots")
    r.add_argument("--work", default="work")
    r.add_argument("--report")
    r.add_argument("--plots", help="directory for PNG plots")
    r.add_argument("--max-overlays", type=int, default=4)
    r.set_defaults(func=cmd_report)
    return p


def _exit_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, (DataError, GridTopoError, OSError)):
        return EXIT_DATA
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "pipeline" and not args.emit_intermediate and args.work == "work":
        args.work = None
    try:
        return args.func(args)
    except (GridTopoError, OSError, ValueError) as exc:
        print(f"gridtopo: error: {exc}", file=sys.stderr)
        return _exit_for(exc)


if __name__ == "__main__":
    sys.exit(main())
