"""Command-line surface.

Every pipeline stage is a subcommand driven by a run manifest; ``run``
executes the manifest's whole stage list, ``validate`` re-checks emitted
datasets for anchor soundness.  Exit codes: 0 success, 1 stage failure
or validation violations, 2 configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cot_filter import filter_trace, rejection_histogram
from .errors import ManifestError, PipelineError
from .manifest import StageSpec, load_manifest
from .pipeline import PipelineRunner
from .qa import validate_outputs
from .records import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

STAGE_COMMANDS = (
    "score",
    "filter-hard",
    "cold-start",
    "export-coder-set",
    "coder-sample",
    "boost",
    "synth",
    "qa-synth",
    "cot-distill",
    "cot-filter",
    "bucket",
    "diagnose",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chartforge",
        description="Complexity-scored chart corpus and QA synthesis pipeline.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    parser.add_argument(
        "--max-parallel", type=int, default=None, help="override per-stage record parallelism"
    )
    parser.add_argument(
        "--dry-run", action="store_true", help="parse and validate configuration, run nothing"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute every stage in the manifest")
    run_p.add_argument("manifest", help="path to the run manifest (strict JSON)")

    for name in STAGE_COMMANDS:
        stage_p = sub.add_parser(name, help=f"run only the {name} stage")
        stage_p.add_argument("--manifest", required=(name != "cot-filter"), help="run manifest path")
        if name == "cot-filter":
            stage_p.add_argument("--traces", help="standalone mode: trace JSONL to filter")
            stage_p.add_argument("--out-dir", default=".", help="standalone mode output directory")
            stage_p.add_argument("--min-words", type=int, default=100)
            stage_p.add_argument("--ngram", type=int, default=50)
            stage_p.add_argument("--min-repeats", type=int, default=3)

    val_p = sub.add_parser("validate", help="re-check emitted sft/rl datasets for anchor soundness")
    val_p.add_argument("dataset", help="output directory containing sft.jsonl and rl.jsonl")
    return parser


def _runner_for(args) -> PipelineRunner:
    manifest = load_manifest(args.manifest)
    if args.seed is not None:
        manifest.seed = args.seed
    if args.max_parallel is not None:
        manifest.max_parallel_records = args.max_parallel
    return PipelineRunner(manifest)


def _trace_text(row: dict) -> str | None:
    for key in ("text", "cot_trace", "raw_text"):
        if isinstance(row.get(key), str):
            return row[key]
    return None


def cot_filter_standalone(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    passed_rows, rejected_rows, verdicts = [], [], []
    for row in read_jsonl(args.traces):
        text = _trace_text(row)
        if text is None:
            rejected_rows.append(dict(row, failures=[{"rule": "template", "detail": "no trace text field"}]))
            continue
        verdict = filter_trace(
            text, min_words=args.min_words, ngram_n=args.ngram, min_repeats=args.min_repeats
        )
        verdicts.append(verdict)
        if verdict.passed:
            passed_rows.append(row)
        else:
            rejected_rows.append(
                dict(row, failures=[{"rule": f.rule, "detail": f.detail} for f in verdict.failures])
            )
    write_jsonl(out_dir / "passed.jsonl", passed_rows)
    write_jsonl(out_dir / "rejected.jsonl", rejected_rows)
    histogram = rejection_histogram(verdicts)
    (out_dir / "histogram.json").write_text(
        json.dumps(histogram, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"passed={len(passed_rows)} rejected={len(rejected_rows)} histogram={histogram}")
    return 0


def cmd_validate(args) -> int:
    root = Path(args.dataset)
    sft, rl = root / "sft.jsonl", root / "rl.jsonl"
    for path in (sft, rl):
        if not path.exists():
            print(f"config error: {path} not found", file=sys.stderr)
            return 2
    violations = validate_outputs(sft, rl)
    for violation in violations:
        print(f"VIOLATION {violation}")
    print(f"checked sft+rl: {len(violations)} violation(s)")
    return 1 if violations else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "cot-filter" and getattr(args, "traces", None):
            return cot_filter_standalone(args)

        if args.command == "run":
            args.manifest = args.manifest  # positional
        runner = _runner_for(args)
        if args.dry_run:
            names = [s.name for s in runner.manifest.stages]
            print(f"manifest ok: {len(names)} stage(s): {', '.join(names)}")
            return 0
        if args.command == "run":
            runner.run()
            print(f"run complete: outputs in {runner.out_root}")
            return 0
        spec = next((s for s in runner.manifest.stages if s.name == args.command), None)
        if spec is None:
            spec = StageSpec(args.command, {})
        try:
            runner.run_stage(spec)
        finally:
            runner.close()
        print(f"stage {args.command} complete: outputs in {runner.out_root}")
        return 0
    except ManifestError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
