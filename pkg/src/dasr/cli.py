"""Command line entry point: ``dasr run | simulate | score | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dasr.errors import DasrError
from dasr.pipeline import PipelineConfig, load_meeting_manifests, run_batch
from dasr.scoring import DEFAULT_COLLAR, build_report, read_metadata, read_transcripts
from dasr.simulator import SimulationParams, simulate

logger = logging.getLogger("dasr")


def _cmd_run(args):
    overrides = {"seed": args.seed, "workers": args.workers, "track": args.track,
                 "out_dir": args.out, "asr": args.asr, "asr_script": args.asr_script,
                 "estimator": args.estimator}
    if args.config:
        cfg = PipelineConfig.from_file(args.config, overrides)
    else:
        cfg = PipelineConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    manifests = load_meeting_manifests(args.manifest)
    result = run_batch(manifests, cfg)
    summary = {"meetings": len(manifests), "processed": len(result.hypotheses),
               "failures": result.failures}
    if result.report is not None:
        summary["aggregates"] = result.report.aggregates
    print(json.dumps(summary, indent=2))
    return 0 if not result.failures else 3


def _cmd_simulate(args):
    params = SimulationParams(num_speakers=args.speakers)
    paths = simulate(args.manifest, args.out, args.count, args.seed, params, args.workers)
    print(f"wrote {len(paths)} bundles to {args.out}")
    return 0


def _cmd_score(args):
    hyps = read_transcripts(args.hyp)
    refs = read_transcripts(args.ref)
    metadata = read_metadata(args.metadata) if args.metadata else []
    report = build_report(hyps, refs, metadata, args.collar, args.seed, args.resamples)
    for path in report.write(args.out):
        print(path)
    print(json.dumps(report.aggregates, indent=2))
    return 0


def _cmd_report(args):
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = json.loads(Path(args.report).read_text())
    rows = data.get("verticals") or []
    if not rows:
        agg = data["aggregates"]
        rows = [{"tag": "all", "metric": m, "meetings": agg["meetings"], "mean": agg[m]["mean"],
                 "ci_low": agg[m]["ci_low"], "ci_high": agg[m]["ci_high"]}
                for m in ("tcpwer", "agnostic")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "verticals.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["tag", "metric", "meetings", "mean",
                                                "ci_low", "ci_high"])
        writer.writeheader()
        writer.writerows(rows)
    for metric in sorted({r["metric"] for r in rows}):
        sub = [r for r in rows if r["metric"] == metric]
        fig, ax = plt.subplots(figsize=(1.2 * len(sub) + 2, 3.5))
        means = [r["mean"] for r in sub]
        lo = [r["mean"] - r["ci_low"] if r["ci_low"] is not None else 0 for r in sub]
        hi = [r["ci_high"] - r["mean"] if r["ci_high"] is not None else 0 for r in sub]
        ax.bar(range(len(sub)), means, yerr=[lo, hi], capsize=4, color="#4c72b0")
        ax.set_xticks(range(len(sub)))
        ax.set_xticklabels([f"{r['tag']}\n(n={r['meetings']})" for r in sub], fontsize=8)
        ax.set_ylabel(metric)
        fig.tight_layout()
        fig.savefig(out / f"verticals_{metric}.svg")
        plt.close(fig)
    print(out / "verticals.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the CSS -> ASR -> diarization pipeline")
    run.add_argument("--manifest", required=True, help="meeting manifest (JSON lines)")
    run.add_argument("--config", help="JSON or TOML pipeline config")
    run.add_argument("--out", help="output directory")
    run.add_argument("--track", choices=["sc", "mc"])
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--asr", choices=["mock", "external"])
    run.add_argument("--asr-script", help="JSON fingerprint -> words script for the mock ASR")
    run.add_argument("--estimator", help="'oracle' or module:factory")
    run.set_defaults(func=_cmd_run)

    sim = sub.add_parser("simulate", help="generate simulated training mixtures")
    sim.add_argument("--manifest", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--count", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--speakers", type=int, default=3)
    sim.add_argument("--workers", type=int, default=1)
    sim.set_defaults(func=_cmd_simulate)

    score = sub.add_parser("score", help="tcpWER and speaker-agnostic WER")
    score.add_argument("--hyp", required=True)
    score.add_argument("--ref", required=True)
    score.add_argument("--collar", type=float, default=DEFAULT_COLLAR)
    score.add_argument("--metadata")
    score.add_argument("--out", required=True)
    score.add_argument("--seed", type=int, default=0)
    score.add_argument("--resamples", type=int, default=10_000)
    score.set_defaults(func=_cmd_score)

    report = sub.add_parser("report", help="vertical tables and plots from a score report")
    report.add_argument("--report", required=True, help="report.json written by score")
    report.add_argument("--out", required=True)
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DasrError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
