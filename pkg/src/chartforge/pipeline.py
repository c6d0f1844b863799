"""Manifest-driven pipeline runner.

Each stage reads its inputs from the output tree of earlier stages,
skips records the run ledger already resolved (so resumed runs issue no
model calls for completed work), and appends retained records to its
output file in input order through a serialized writer.  Stage handlers
map one-to-one onto CLI subcommands.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Sequence

from .broker import ExecutionBroker
from .diagnostics import build_report
from .cot_filter import filter_trace, rejection_histogram
from .errors import ManifestError
from .forge import ChartForge, HardSeedIndex, load_corpus_images
from .gateway import Gateway, Transport
from .ledger import RunLedger
from .manifest import PipelineManifest, StageSpec
from .prompt_catalog import PromptCatalog
from .qa import QaForge, bucket, emit_datasets
from .records import ChartRecord, QaCandidate, dumps, read_jsonl, write_jsonl
from .store import ImageStore

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class _Sink:
    """Append-mode JSONL writer flushed per record (crash-consistent prefix)."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record) -> None:
        self._fh.write(dumps(record.to_json()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _dedupe_rows(rows: list[dict], key: str) -> list[dict]:
    """Keep the last occurrence per key (a crash can duplicate one row)."""
    by_key: dict[str, int] = {}
    for i, row in enumerate(rows):
        by_key[row[key]] = i
    picked = sorted(by_key.values())
    return [rows[i] for i in picked]


class PipelineRunner:
    def __init__(self, manifest: PipelineManifest, transport: Transport | None = None):
        self.manifest = manifest
        self.out_root = Path(manifest.output_root)
        self.out_root.mkdir(parents=True, exist_ok=True)
        self.store = ImageStore(manifest.store_root)
        self.ledger = RunLedger(self.out_root / "ledger.jsonl", canonical=manifest.canonical_ledger)
        self.gateway = Gateway(transport=transport)
        self.prompts = PromptCatalog(manifest.prompt_overrides)
        self.broker: ExecutionBroker | None = None

    # -- helpers ---------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out_root / name

    def _require_broker(self) -> ExecutionBroker:
        if self.broker is None:
            self.broker = ExecutionBroker(
                self.manifest.worker_cmd, pool_size=self.manifest.worker_pool_size
            )
        return self.broker

    def _forge(self, spec: StageSpec) -> ChartForge:
        m = self.manifest
        forge = ChartForge(
            self.gateway,
            self._require_broker(),
            self.store,
            self.ledger,
            self.prompts,
            rollout_endpoint=m.endpoint(spec.get("rollout_endpoint", "rollout") or "rollout"),
            embed_endpoint=m.endpoint(spec.get("embed_endpoint", "embed") or "embed"),
            zero_valid_policy=m.zero_valid_policy,
            sigma_source=m.sigma_source,
            render_timeout_s=m.render_timeout_s,
            max_workers=m.max_parallel_records,
        )
        return forge

    def _qa_forge(self, spec: StageSpec) -> QaForge:
        m = self.manifest
        return QaForge(
            self.gateway,
            self._require_broker(),
            self.store,
            self.ledger,
            self.prompts,
            qa_endpoint=m.endpoint(spec.get("endpoint", "qa") or "qa"),
            distill_endpoint=m.endpoint(spec.get("distill_endpoint", "distill") or "distill"),
            script_timeout_s=m.render_timeout_s,
            max_workers=m.max_parallel_records,
        )

    def _load_charts(self, name: str) -> list[ChartRecord]:
        path = self.path(name)
        if not path.exists():
            return []
        rows = _dedupe_rows(list(read_jsonl(path)), "chart_id")
        return [ChartRecord.from_json(row) for row in rows]

    def _load_candidates(self, name: str) -> list[QaCandidate]:
        path = self.path(name)
        if not path.exists():
            return []
        rows = _dedupe_rows(list(read_jsonl(path)), "qa_id")
        return [QaCandidate.from_json(row) for row in rows]

    def _corpus_records(self) -> list[ChartRecord]:
        spec = self.manifest.inputs.get("corpus_images")
        if spec is None:
            raise ManifestError("inputs.corpus_images: required for the score stage")
        if isinstance(spec, str):
            root = Path(spec)
            paths = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        else:
            paths = [Path(p) for p in spec]
        return load_corpus_images(paths, self.store)

    def _with_sink(self, forge, out_name: str, fn: Callable) -> None:
        sink = _Sink(self.path(out_name))
        forge.on_retained = sink
        try:
            fn()
        finally:
            forge.on_retained = None
            sink.close()

    # -- stage handlers ----------------------------------------------------------

    def stage_score(self, spec: StageSpec) -> None:
        forge = self._forge(spec)
        records = self._corpus_records()
        pending = set(self.ledger.pending("score", [r.chart_id for r in records]))
        todo = [r for r in records if r.chart_id in pending]
        if todo:
            self._with_sink(
                forge,
                "scored.jsonl",
                lambda: forge.score_corpus(todo, rollouts=spec.get("rollouts"), stage="score"),
            )

    def stage_filter_hard(self, spec: StageSpec) -> None:
        forge = self._forge(spec)
        records = self._load_charts("scored.jsonl")
        done = set(self.ledger.terminal_actions("filter-hard"))
        index, kept = forge.filter_hard(
            records, threshold=spec.get("rpe_threshold"), ledger_skip=done
        )
        index.save(self.path("hard_index.jsonl"))
        write_jsonl(self.path("hard.jsonl"), (r.to_json() for r in kept))

    def stage_cold_start(self, spec: StageSpec) -> None:
        forge = self._forge(spec)
        hard = self._load_charts("hard.jsonl")
        pending = set(self.ledger.pending("cold-start", [r.chart_id for r in hard]))
        todo = [r for r in hard if r.chart_id in pending]
        if todo:
            endpoint = self.manifest.endpoint(spec.get("endpoint", "codegen") or "codegen")
            self._with_sink(
                forge,
                "cold.jsonl",
                lambda: forge.cold_start(todo, endpoint, stage="cold-start"),
            )

    def stage_export_coder_set(self, spec: StageSpec, iteration: int | None = None) -> None:
        forge = self._forge(spec)
        sources = spec.params.get("sources")
        if sources is None:
            sources = ["cold.jsonl"]
            if iteration is not None:
                sources += [f"boost_iter{i}.jsonl" for i in range(iteration)]
        records = [r for name in sources for r in self._load_charts(name)]
        suffix = iteration if iteration is not None else spec.params.get("tag", 0)
        out_name = spec.params.get("out", f"coder_sft_iter{suffix}.jsonl")
        stage = f"export-coder-set:i{suffix}"
        done = {
            e.record_id for e in self.ledger.events() if e.stage == stage and e.action == "emitted"
        }
        forge.export_coder_training_set(records, self.path(out_name), stage=stage, ledger_skip=done)

    def _sample_into(
        self, spec: StageSpec, endpoint_name: str, count: int, iteration: int, stage: str, out_name: str
    ) -> list[ChartRecord]:
        forge = self._forge(spec)
        done = set(self.ledger.terminal_actions(stage))
        prior = self._load_charts(out_name)
        if len(done) < count:
            endpoint = self.manifest.endpoint(endpoint_name)
            self._with_sink(
                forge,
                out_name,
                lambda: forge.sample_candidates(
                    endpoint,
                    count,
                    iteration=iteration,
                    stage=stage,
                    skip_ids=done,
                    already_seen={r.chart_id for r in prior},
                ),
            )
        return self._load_charts(out_name)

    def stage_coder_sample(self, spec: StageSpec) -> None:
        iteration = int(spec.params.get("iteration", 0))
        self._sample_into(
            spec,
            spec.get("endpoint", "coder") or "coder",
            int(spec.params.get("count", 8)),
            iteration,
            f"coder-sample:i{iteration}",
            f"candidates_iter{iteration}.jsonl",
        )

    def stage_boost(self, spec: StageSpec, iteration: int | None = None) -> None:
        iteration = int(spec.params.get("iteration", 0)) if iteration is None else iteration
        forge = self._forge(spec)
        candidates = self._load_charts(f"candidates_iter{iteration}.jsonl")
        index = HardSeedIndex.load(self.path("hard_index.jsonl"))
        if spec.get("grow_index", False):
            for i in range(iteration):
                for record in self._load_charts(f"boost_iter{i}.jsonl"):
                    index.add(record.chart_id, record.embedding)
        stage = f"boost:i{iteration}"
        pending = set(self.ledger.pending(stage, [r.chart_id for r in candidates]))
        todo = [r for r in candidates if r.chart_id in pending]
        if todo:
            self._with_sink(
                forge,
                f"boost_iter{iteration}.jsonl",
                lambda: forge.boost_filter(
                    todo,
                    index,
                    rpe_threshold=spec.get("rpe_threshold"),
                    sim_limit=spec.get("sim_limit"),
                    rollouts=spec.get("rollouts"),
                    stage=stage,
                ),
            )

    def stage_self_enhance(self, spec: StageSpec) -> None:
        iterations = int(spec.get("iterations"))
        endpoints = spec.get("endpoint", "coder") or "coder"
        if isinstance(endpoints, str):
            endpoints = [endpoints] * iterations
        if len(endpoints) < iterations:
            raise ManifestError("self-enhance: one coder endpoint per iteration required")
        count = int(spec.params.get("count", 8))
        for i in range(iterations):
            self._sample_into(
                spec, endpoints[i], count, i, f"coder-sample:i{i}", f"candidates_iter{i}.jsonl"
            )
            self.stage_boost(spec, iteration=i)
            self.stage_export_coder_set(spec, iteration=i + 1)

    def stage_synth(self, spec: StageSpec) -> None:
        iterations = int(spec.get("iterations"))
        samples = self._sample_into(
            spec,
            spec.get("endpoint", "coder") or "coder",
            int(spec.params.get("count", 8)),
            iterations,
            "synth-sample",
            "synth_candidates.jsonl",
        )
        forge = self._forge(spec)
        pending = set(self.ledger.pending("synth-score", [r.chart_id for r in samples]))
        todo = [r for r in samples if r.chart_id in pending]
        if todo:
            self._with_sink(
                forge,
                "synth_scored.jsonl",
                lambda: forge.score_candidates(
                    todo, rollouts=spec.get("rollouts"), stage="synth-score", terminal=True
                ),
            )
        scored = self._load_charts("synth_scored.jsonl")
        done = set(self.ledger.terminal_actions("synth"))
        forge.synth_dataset(
            scored,
            rpe_threshold=spec.get("rpe_threshold"),
            out_dir=self.out_root,
            ledger_skip=done,
        )

    def stage_qa_synth(self, spec: StageSpec) -> None:
        qa = self._qa_forge(spec)
        charts = self._load_charts("dsyn.jsonl")
        done = set(self.ledger.terminal_actions("qa-synth"))
        sink = _Sink(self.path("qa_candidates.jsonl"))
        qa.on_retained = sink
        try:
            qa.synth_candidates(
                charts, scripts_per_chart=spec.get("scripts_per_chart"), skip_qa_ids=done
            )
        finally:
            qa.on_retained = None
            sink.close()

    def stage_cot_distill(self, spec: StageSpec) -> None:
        qa = self._qa_forge(spec)
        candidates = self._load_candidates("qa_candidates.jsonl")
        pending = set(self.ledger.pending("cot-distill", [c.qa_id for c in candidates]))
        todo = [c for c in candidates if c.qa_id in pending]
        if todo:
            sink = _Sink(self.path("distilled.jsonl"))
            qa.on_retained = sink
            try:
                qa.distill_candidates(todo, traces=spec.get("traces"))
            finally:
                qa.on_retained = None
                sink.close()

    def stage_cot_filter(self, spec: StageSpec) -> None:
        candidates = self._load_candidates("distilled.jsonl")
        rows = []
        verdicts = []
        for cand in candidates:
            for i, trace in enumerate(cand.traces):
                verdict = filter_trace(
                    trace.raw_text,
                    min_words=spec.get("min_words"),
                    ngram_n=spec.get("ngram_n"),
                    min_repeats=spec.get("min_repeats"),
                )
                verdicts.append(verdict)
                rows.append(
                    {
                        "qa_id": cand.qa_id,
                        "trace_index": i,
                        "passed": verdict.passed,
                        "failures": [{"rule": f.rule, "detail": f.detail} for f in verdict.failures],
                    }
                )
        write_jsonl(self.path("trace_verdicts.jsonl"), rows)
        histogram = rejection_histogram(verdicts)
        self.path("filter_histogram.json").write_text(
            json.dumps(histogram, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )

    def _trace_filter(self) -> Callable[[QaCandidate, int], bool] | None:
        path = self.path("trace_verdicts.jsonl")
        if not path.exists():
            return None
        passed = {(row["qa_id"], row["trace_index"]): row["passed"] for row in read_jsonl(path)}
        return lambda cand, i: passed.get((cand.qa_id, i), True)

    def stage_bucket(self, spec: StageSpec) -> None:
        candidates = self._load_candidates("distilled.jsonl")
        partition = bucket(candidates, int(spec.get("rl_quota")), trace_ok=self._trace_filter())
        done = set(self.ledger.terminal_actions("bucket"))
        emit_datasets(partition, self.out_root, self.ledger, stage="bucket", ledger_skip=done)
        write_jsonl(
            self.path("qa_final.jsonl"),
            (c.to_json() for name in ("rl", "sft", "rejected") for c in partition[name]),
        )

    def stage_diagnose(self, spec: StageSpec) -> None:
        corpora = []
        for corpus_id, name in (("corpus", "scored.jsonl"), ("synthetic", "dsyn.jsonl")):
            records = self._load_charts(name)
            if records:
                corpora.append((corpus_id, records))
        extra = spec.params.get("corpora", {})
        for corpus_id, path in extra.items():
            rows = [ChartRecord.from_json(r) for r in read_jsonl(path)]
            corpora.append((corpus_id, rows))
        build_report(
            corpora,
            self.path("diagnostics"),
            self.store,
            sample_size=int(spec.get("sample_size")),
            seed=self.manifest.seed,
        )

    # -- driver --------------------------------------------------------------------

    HANDLERS = {
        "score": stage_score,
        "filter-hard": stage_filter_hard,
        "cold-start": stage_cold_start,
        "export-coder-set": stage_export_coder_set,
        "coder-sample": stage_coder_sample,
        "boost": stage_boost,
        "self-enhance": stage_self_enhance,
        "synth": stage_synth,
        "qa-synth": stage_qa_synth,
        "cot-distill": stage_cot_distill,
        "cot-filter": stage_cot_filter,
        "bucket": stage_bucket,
        "diagnose": stage_diagnose,
    }

    def run_stage(self, spec: StageSpec) -> None:
        logger.info("stage %s starting", spec.name)
        self.HANDLERS[spec.name](self, spec)
        logger.info("stage %s done", spec.name)

    def run(self) -> int:
        try:
            for spec in self.manifest.stages:
                self.run_stage(spec)
        finally:
            if self.broker is not None:
                self.broker.shutdown()
                self.broker = None
        return len(self.manifest.stages)

    def close(self) -> None:
        if self.broker is not None:
            self.broker.shutdown()
            self.broker = None


def output_tree_digest(roots: Sequence[str | Path]) -> dict[str, str]:
    """Relative path -> SHA-256 of every file under the given roots."""
    import hashlib

    digest: dict[str, str] = {}
    for root in roots:
        root = Path(root)
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            digest[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digest
