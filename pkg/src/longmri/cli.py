"""Command line entry point: ``longmri run | phantom | trend``.

Exit codes: 0 success, 1 partial failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .errors import LongMRIError
from .hmrf import TISSUES
from .phantom import CohortSpec, PhantomSpec, generate_cohort
from .pipeline import Manifest, PipelineConfig, run_cohort
from .trend import MIN_VISITS, analyze_trend, trend_csv
from .volumetry import read_volumes_csv

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


def _cmd_run(args) -> int:
    manifest = Manifest.load(args.manifest)
    config = PipelineConfig(beta_mrf=args.beta_mrf, pve_threshold=args.pve_threshold,
                            deadband_ml=args.deadband_ml, out_dir=Path(args.out), workers=args.workers,
                            seed=args.seed, keep_intermediates=args.keep_intermediates,
                            measure_space=args.measure_space)
    config = replace(config, seg=replace(config.seg, iterations=args.em_iters))
    reports, code = run_cohort(manifest, config)
    for r in reports:
        for f in r.failures:
            print(f"{r.patient_id} visit {f.visit}: {f.stage} failed: {f.message}", file=sys.stderr)
    return EXIT_PARTIAL if code else EXIT_OK


def cohort_spec_from_doc(doc: dict) -> CohortSpec:
    """A cohort spec, or a bare phantom spec that sets the anatomy of a default cohort."""
    if doc and set(doc) <= {f.name for f in fields(PhantomSpec)}:
        doc = {"phantom": doc}
    return CohortSpec.from_json(doc)


def _cmd_phantom(args) -> int:
    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    cohort = cohort_spec_from_doc(doc)
    manifest = generate_cohort(cohort, args.out)
    print(f"wrote {len(manifest['patients'])} patients to {args.out}")
    return EXIT_OK


def _cmd_trend(args) -> int:
    records = read_volumes_csv(Path(args.csv).read_text())
    series: dict[str, list] = {}
    for r in records:
        series.setdefault(r.patient_id, []).append(r)
    results, skipped = [], 0
    for pid, recs in series.items():
        recs.sort(key=lambda r: r.visit)
        if len(recs) < MIN_VISITS:
            print(f"{pid}: trend needs at least three visits, got {len(recs)}", file=sys.stderr)
            skipped += 1
            continue
        for k, tissue in enumerate(TISSUES):
            results.append((pid, tissue, analyze_trend([r.volumes_ml[k] for r in recs], args.deadband_ml)))
    sys.stdout.write(trend_csv(results))
    return EXIT_PARTIAL if skipped else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longmri", description="Longitudinal brain tissue volumetry")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline on a manifest")
    run.add_argument("--manifest", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--beta-mrf", type=float, default=0.4)
    run.add_argument("--pve-threshold", type=float, default=0.4)
    run.add_argument("--deadband-ml", type=float, default=1.0)
    run.add_argument("--em-iters", type=int, default=20)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--keep-intermediates", action="store_true")
    run.add_argument("--measure-space", choices=("native", "base"), default="native")
    run.set_defaults(func=_cmd_run)

    ph = sub.add_parser("phantom", help="generate a synthetic cohort")
    ph.add_argument("--spec", help="cohort or phantom spec JSON (defaults for missing fields)")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=_cmd_phantom)

    tr = sub.add_parser("trend", help="Mann-Kendall trends from a volumes CSV")
    tr.add_argument("--csv", required=True)
    tr.add_argument("--deadband-ml", type=float, default=1.0)
    tr.set_defaults(func=_cmd_trend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LongMRIError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
