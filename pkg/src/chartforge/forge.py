"""Chart complexity pipeline stages.

Implements the scoring campaign (reconstruction rollouts -> render ->
embed -> entropy score), the hard-seed gate, cold-start code inference,
coder sampling, the boost filter (complexity + dissimilarity), and the
final dataset export.  Stages log one terminal ledger action per input
record (retained / dropped / failed) so interrupted campaigns resume
without re-invoking model endpoints.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .broker import ExecutionBroker
from .entropy import RpeScore, rpe
from .errors import (
    ExecutionFailedError,
    GatewayProtocolError,
    InvalidInputError,
    TransportError,
    WorkerProtocolError,
)
from .gateway import (
    CODER_SAMPLING,
    ROLLOUT_SAMPLING,
    ChatRequest,
    EmbeddingVector,
    EndpointConfig,
    Gateway,
    ImagePart,
    Message,
    TextPart,
)
from .ledger import RunLedger
from .prompt_catalog import PromptCatalog
from .records import ChartRecord, read_jsonl, write_jsonl
from .store import ImageStore

logger = logging.getLogger(__name__)

DEFAULT_RPE_THRESHOLD = 0.4
DEFAULT_SIM_LIMIT = 0.65
DEFAULT_ROLLOUTS = 8

_FENCE_RE = re.compile(r"```(?:[A-Za-z0-9_+-]*)\s*\n(.*?)```", re.DOTALL)
_IMPORT_RE = re.compile(r"^\s*(?:import|from)\s+\w", re.MULTILINE)


def extract_code(text: str) -> str | None:
    """First fenced code block; else the whole completion when it looks like code."""
    m = _FENCE_RE.search(text)
    if m:
        block = m.group(1).strip()
        return block or None
    if _IMPORT_RE.search(text):
        return text.strip()
    return None


def passes_hard_gate(score: RpeScore, threshold: float) -> bool:
    """Inclusive complexity gate; the all-failures sentinel always passes."""
    return score.value >= threshold


def passes_boost_gate(score: RpeScore, max_sim: float, rpe_threshold: float, sim_limit: float) -> bool:
    """Complexity >= threshold AND similarity <= limit, both inclusive."""
    return score.value >= rpe_threshold and max_sim <= sim_limit


class HardSeedIndex:
    """Embeddings of the hard seed charts; brute-force max-cosine lookups."""

    def __init__(self, entries: Sequence[tuple[str, EmbeddingVector]] = ()):
        self.chart_ids: list[str] = []
        self._rows: list[tuple[float, ...]] = []
        self._dim: int | None = None
        for chart_id, emb in entries:
            self.add(chart_id, emb)

    def add(self, chart_id: str, embedding: EmbeddingVector) -> None:
        if chart_id in self.chart_ids:
            raise InvalidInputError(f"duplicate chart_id in hard-seed index: {chart_id}")
        if self._dim is not None and len(embedding.values) != self._dim:
            raise InvalidInputError(
                f"index dimension mismatch: {len(embedding.values)} != {self._dim}"
            )
        self._dim = len(embedding.values)
        self.chart_ids.append(chart_id)
        self._rows.append(embedding.values)

    def __len__(self) -> int:
        return len(self.chart_ids)

    def max_cosine(self, embedding: EmbeddingVector) -> float:
        if not self._rows:
            raise InvalidInputError("hard-seed index is empty")
        matrix = np.asarray(self._rows, dtype=np.float64)
        vec = np.asarray(embedding.values, dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(vec)
        dots = matrix @ vec
        safe = norms > 0
        if not np.any(safe):
            return 0.0
        return float(np.max(dots[safe] / norms[safe]))

    def save(self, path: str | Path) -> None:
        write_jsonl(
            path,
            (
                {"chart_id": cid, "values": list(row)}
                for cid, row in zip(self.chart_ids, self._rows)
            ),
        )

    @staticmethod
    def load(path: str | Path, model_id: str = "index") -> "HardSeedIndex":
        index = HardSeedIndex()
        for obj in read_jsonl(path):
            index.add(obj["chart_id"], EmbeddingVector(tuple(obj["values"]), model_id))
        return index


@dataclass
class _Outcome:
    """What happened to one record inside a stage worker."""

    action: str  # retained | dropped | failed
    cause: str = ""
    record: ChartRecord | None = None


class ChartForge:
    def __init__(
        self,
        gateway: Gateway,
        broker: ExecutionBroker,
        store: ImageStore,
        ledger: RunLedger,
        prompts: PromptCatalog,
        *,
        rollout_endpoint: EndpointConfig,
        embed_endpoint: EndpointConfig,
        zero_valid_policy: str = "sentinel",
        sigma_source: str = "gram_eigenvalues",
        render_timeout_s: float = 60.0,
        max_workers: int = 1,
    ):
        self.gateway = gateway
        self.broker = broker
        self.store = store
        self.ledger = ledger
        self.prompts = prompts
        self.rollout_endpoint = rollout_endpoint
        self.embed_endpoint = embed_endpoint
        self.zero_valid_policy = zero_valid_policy
        self.sigma_source = sigma_source
        self.render_timeout_s = render_timeout_s
        self.max_workers = max_workers
        # Incremental writer invoked for each retained record just before
        # its terminal ledger action; lets interrupted stages resume from
        # a consistent (output row, ledger line) prefix.
        self.on_retained: Callable[[ChartRecord], None] | None = None

    def _emit(self, record: ChartRecord) -> None:
        if self.on_retained is not None:
            self.on_retained(record)

    # -- shared machinery ---------------------------------------------------

    def _map_ordered(self, items: Sequence, fn: Callable) -> Iterator[tuple[object, _Outcome]]:
        """Run fn over items with bounded parallelism, yielding in input order."""
        if self.max_workers <= 1 or len(items) <= 1:
            for item in items:
                yield item, fn(item)
            return
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            yield from zip(items, pool.map(fn, items))

    def _rollout_request(self, image_bytes: bytes, rollouts: int, sampling: dict) -> ChatRequest:
        prompt = self.prompts.get("rollout")
        message = Message("user", (TextPart(prompt), ImagePart(image_bytes)))
        return ChatRequest(messages=(message,), n_samples=rollouts, **sampling)

    def score_image(
        self, image_bytes: bytes, rollouts: int, sampling: dict | None = None
    ) -> tuple[RpeScore | None, EmbeddingVector]:
        """Full scoring campaign for one image.

        Issues ``rollouts`` reconstruction completions, renders each
        extracted program, embeds the successful renders, and scores
        them; also embeds the image itself for downstream similarity
        lookups.  Raises TransportError/GatewayProtocolError upward so
        the caller can mark the record as failed-but-resumable.
        """
        sampling = dict(ROLLOUT_SAMPLING) if sampling is None else sampling
        completions = self.gateway.chat(
            self.rollout_endpoint, self._rollout_request(image_bytes, rollouts, sampling)
        )
        renders: list[bytes] = []
        for i, completion in enumerate(completions):
            code = extract_code(completion)
            if code is None:
                logger.debug("rollout %d: no code block extracted", i)
                continue
            try:
                renders.append(
                    self.broker.render_chart(code, self.render_timeout_s, task_id=f"rollout{i}")
                )
            except (ExecutionFailedError, WorkerProtocolError) as exc:
                logger.debug("rollout %d: render failed (%s)", i, exc)
        own_embedding = self.gateway.embed(self.embed_endpoint, [image_bytes])[0]
        if renders:
            vectors = self.gateway.embed(self.embed_endpoint, renders)
            matrix = np.asarray([v.values for v in vectors], dtype=np.float64)
        else:
            matrix = None
        score = rpe(
            rollouts,
            matrix,
            zero_valid_policy=self.zero_valid_policy,
            sigma_source=self.sigma_source,
        )
        return score, own_embedding

    # -- pipeline stages -----------------------------------------------------

    def score_corpus(
        self,
        records: Sequence[ChartRecord],
        rollouts: int = DEFAULT_ROLLOUTS,
        sampling: dict | None = None,
        stage: str = "score",
    ) -> list[ChartRecord]:
        """Score every corpus record; transport failures never abort the campaign."""

        def work(record: ChartRecord) -> _Outcome:
            try:
                image_bytes = self.store.get(record.image_ref)
                score, embedding = self.score_image(image_bytes, rollouts, sampling)
            except (TransportError, GatewayProtocolError) as exc:
                return _Outcome("failed", f"scoring_failed: {exc}")
            if score is None:
                return _Outcome("dropped", "zero_valid_dropped")
            flags = list(record.flags)
            if 0 < score.valid_count <= 2 and "trivial_entropy" not in flags:
                flags.append("trivial_entropy")
            scored = ChartRecord(
                chart_id=record.chart_id,
                source=record.source,
                code=record.code,
                image_ref=record.image_ref,
                embedding=embedding,
                rpe=score,
                max_sim_to_hard=record.max_sim_to_hard,
                iteration=record.iteration,
                flags=flags,
            )
            return _Outcome("retained", "scored", scored)

        out: list[ChartRecord] = []
        for record, outcome in self._map_ordered(records, work):
            if outcome.record is not None and outcome.record.rpe is not None:
                score = outcome.record.rpe
                self.ledger.append(
                    stage,
                    record.chart_id,
                    "emitted",
                    f"rollouts_ok={score.valid_count}/{score.attempted_count}",
                )
            if outcome.action == "retained" and outcome.record is not None:
                self._emit(outcome.record)
            self.ledger.append(stage, record.chart_id, outcome.action, outcome.cause)
            if outcome.record is not None:
                out.append(outcome.record)
        return out

    def filter_hard(
        self,
        records: Sequence[ChartRecord],
        threshold: float = DEFAULT_RPE_THRESHOLD,
        stage: str = "filter-hard",
        ledger_skip: set[str] | None = None,
    ) -> tuple[HardSeedIndex, list[ChartRecord]]:
        """Keep records scoring at or above the threshold; build their embedding index."""
        unscored = [r.chart_id for r in records if r.rpe is None]
        if unscored:
            raise InvalidInputError(f"filter_hard: unscored records: {unscored}")
        ledger_skip = ledger_skip or set()
        index = HardSeedIndex()
        kept: list[ChartRecord] = []
        for record in records:
            if passes_hard_gate(record.rpe, threshold):
                if record.embedding is None:
                    raise InvalidInputError(
                        f"filter_hard: record {record.chart_id} has no embedding"
                    )
                index.add(record.chart_id, record.embedding)
                kept.append(record)
                if record.chart_id not in ledger_skip:
                    self.ledger.append(stage, record.chart_id, "retained", f"rpe>={threshold}")
            elif record.chart_id not in ledger_skip:
                self.ledger.append(stage, record.chart_id, "dropped", f"rpe<{threshold}")
        return index, kept

    def cold_start(
        self,
        hard_records: Sequence[ChartRecord],
        codegen_endpoint: EndpointConfig,
        sampling: dict | None = None,
        stage: str = "cold-start",
    ) -> list[ChartRecord]:
        """Infer code for each hard image; keep only programs that execute."""
        sampling = {"temperature": 0.6} if sampling is None else sampling
        prompt = self.prompts.get("codegen")

        def work(record: ChartRecord) -> _Outcome:
            try:
                image_bytes = self.store.get(record.image_ref)
                message = Message("user", (TextPart(prompt), ImagePart(image_bytes)))
                completion = self.gateway.chat(
                    codegen_endpoint, ChatRequest(messages=(message,), **sampling)
                )[0]
            except (TransportError, GatewayProtocolError) as exc:
                return _Outcome("failed", f"codegen_failed: {exc}")
            code = extract_code(completion)
            if code is None:
                return _Outcome("dropped", "no_code_block")
            try:
                artifact = self.broker.render_chart(code, self.render_timeout_s, task_id="cold")
            except (ExecutionFailedError, WorkerProtocolError) as exc:
                status = getattr(exc, "status", "protocol")
                return _Outcome("dropped", f"execution:{status}")
            image_ref = self.store.put(artifact)
            cold = ChartRecord.for_code(code, source="cold_start")
            cold.image_ref = image_ref
            return _Outcome("retained", "executed", cold)

        out: list[ChartRecord] = []
        seen: set[str] = set()
        for record, outcome in self._map_ordered(hard_records, work):
            if outcome.record is not None and outcome.record.chart_id in seen:
                outcome = _Outcome("dropped", "duplicate_code")
            if outcome.action == "retained" and outcome.record is not None:
                self._emit(outcome.record)
            self.ledger.append(stage, record.chart_id, outcome.action, outcome.cause)
            if outcome.record is not None and outcome.action == "retained":
                seen.add(outcome.record.chart_id)
                out.append(outcome.record)
        return out

    def export_coder_training_set(
        self,
        records: Sequence[ChartRecord],
        out_path: str | Path,
        stage: str = "export-coder-set",
        ledger_skip: set[str] | None = None,
    ) -> int:
        """Emit {system, output} JSONL pairs for external coder training."""
        missing = [r.chart_id for r in records if not r.code]
        if missing:
            raise InvalidInputError(f"export: records without code: {missing}")
        ledger_skip = ledger_skip or set()
        system_prompt = self.prompts.get("coder_system")
        count = write_jsonl(
            out_path, ({"system": system_prompt, "output": r.code} for r in records)
        )
        for record in records:
            if record.chart_id not in ledger_skip:
                self.ledger.append(stage, record.chart_id, "emitted", Path(out_path).name)
        return count

    def sample_candidates(
        self,
        coder_endpoint: EndpointConfig,
        count: int,
        iteration: int = 0,
        sampling: dict | None = None,
        stage: str = "coder-sample",
        skip_ids: set[str] | None = None,
        already_seen: set[str] | None = None,
    ) -> list[ChartRecord]:
        """Draw ``count`` programs from the coder; content-hash deduplicated.

        ``skip_ids`` holds sample slots already terminal in the ledger (resume);
        ``already_seen`` holds chart_ids from previously persisted samples so
        dedup stays consistent across a resume.
        """
        sampling = dict(CODER_SAMPLING) if sampling is None else sampling
        request = ChatRequest(
            messages=(
                Message.text("system", self.prompts.get("coder_system")),
                Message.text("user", ""),
            ),
            **sampling,
        )

        def work(sample_id: str) -> _Outcome:
            try:
                completion = self.gateway.chat(coder_endpoint, request)[0]
            except (TransportError, GatewayProtocolError) as exc:
                return _Outcome("failed", f"sampling_failed: {exc}")
            code = extract_code(completion)
            if code is None:
                return _Outcome("dropped", "no_code_block")
            record = ChartRecord.for_code(code, source="coder_sample", iteration=iteration)
            return _Outcome("retained", "sampled", record)

        skip_ids = skip_ids or set()
        sample_ids = [f"sample:{iteration}:{i}" for i in range(count) if f"sample:{iteration}:{i}" not in skip_ids]
        out: list[ChartRecord] = []
        seen: set[str] = set(already_seen or ())
        for sample_id, outcome in self._map_ordered(sample_ids, work):
            if outcome.record is not None and outcome.record.chart_id in seen:
                outcome = _Outcome("dropped", "duplicate_code")
            if outcome.action == "retained" and outcome.record is not None:
                self._emit(outcome.record)
            self.ledger.append(stage, sample_id, outcome.action, outcome.cause)
            if outcome.record is not None and outcome.action == "retained":
                seen.add(outcome.record.chart_id)
                out.append(outcome.record)
        return out

    def score_candidates(
        self,
        records: Sequence[ChartRecord],
        rollouts: int = DEFAULT_ROLLOUTS,
        sampling: dict | None = None,
        stage: str = "boost",
        terminal: bool = False,
    ) -> list[ChartRecord]:
        """Render candidate programs and score the renders.

        Records whose code fails to execute are dropped (ledgered under
        ``stage``); survivors come back with image_ref, rpe and
        embedding filled in.  With ``terminal=False`` the caller applies
        its own gate and ledgers the survivors; ``terminal=True`` makes
        scoring itself the stage (survivors are retained and emitted).
        """

        def work(record: ChartRecord) -> _Outcome:
            try:
                artifact = self.broker.render_chart(
                    record.code, self.render_timeout_s, task_id="cand"
                )
            except (ExecutionFailedError, WorkerProtocolError) as exc:
                status = getattr(exc, "status", "protocol")
                return _Outcome("dropped", f"execution:{status}")
            try:
                score, embedding = self.score_image(artifact, rollouts, sampling)
            except (TransportError, GatewayProtocolError) as exc:
                return _Outcome("failed", f"scoring_failed: {exc}")
            if score is None:
                return _Outcome("dropped", "zero_valid_dropped")
            scored = ChartRecord(
                chart_id=record.chart_id,
                source=record.source,
                code=record.code,
                image_ref=self.store.put(artifact),
                embedding=embedding,
                rpe=score,
                iteration=record.iteration,
                flags=list(record.flags),
            )
            return _Outcome("retained", "scored", scored)

        out: list[ChartRecord] = []
        for record, outcome in self._map_ordered(records, work):
            if outcome.record is not None and outcome.record.rpe is not None:
                score = outcome.record.rpe
                self.ledger.append(
                    stage,
                    record.chart_id,
                    "emitted",
                    f"rollouts_ok={score.valid_count}/{score.attempted_count}",
                )
            if outcome.action != "retained":
                self.ledger.append(stage, record.chart_id, outcome.action, outcome.cause)
            elif outcome.record is not None:
                if terminal:
                    self._emit(outcome.record)
                    self.ledger.append(stage, record.chart_id, "retained", "scored")
                out.append(outcome.record)
        return out

    def boost_filter(
        self,
        candidates: Sequence[ChartRecord],
        index: HardSeedIndex,
        rpe_threshold: float = DEFAULT_RPE_THRESHOLD,
        sim_limit: float = DEFAULT_SIM_LIMIT,
        rollouts: int = DEFAULT_ROLLOUTS,
        sampling: dict | None = None,
        stage: str = "boost",
    ) -> list[ChartRecord]:
        """Retain complex, non-redundant candidates (both bounds inclusive)."""
        if len(index) == 0:
            raise InvalidInputError("boost_filter: hard-seed index is empty")
        scored = self.score_candidates(candidates, rollouts, sampling, stage=stage)
        kept: list[ChartRecord] = []
        for record in scored:
            record.max_sim_to_hard = index.max_cosine(record.embedding)
            if passes_boost_gate(record.rpe, record.max_sim_to_hard, rpe_threshold, sim_limit):
                self._emit(record)
                self.ledger.append(stage, record.chart_id, "retained", "boost_gate")
                kept.append(record)
            elif not passes_hard_gate(record.rpe, rpe_threshold):
                self.ledger.append(stage, record.chart_id, "dropped", "low_rpe")
            else:
                self.ledger.append(stage, record.chart_id, "dropped", "too_similar")
        return kept

    def synth_dataset(
        self,
        scored: Sequence[ChartRecord],
        rpe_threshold: float = DEFAULT_RPE_THRESHOLD,
        out_dir: str | Path | None = None,
        stage: str = "synth",
        ledger_skip: set[str] | None = None,
    ) -> tuple[dict, list[ChartRecord]]:
        """Final image/code dataset: keep scored pairs at or above the threshold."""
        ledger_skip = ledger_skip or set()
        kept: list[ChartRecord] = []
        dropped = 0
        for record in scored:
            if record.rpe is None:
                raise InvalidInputError(f"synth_dataset: unscored record {record.chart_id}")
            if passes_hard_gate(record.rpe, rpe_threshold):
                if record.chart_id not in ledger_skip:
                    self.ledger.append(stage, record.chart_id, "retained", "synth_gate")
                kept.append(record)
            else:
                if record.chart_id not in ledger_skip:
                    self.ledger.append(stage, record.chart_id, "dropped", "low_rpe")
                dropped += 1
        manifest = {
            "record_count": len(kept),
            "dropped_count": dropped,
            "input_count": len(scored),
            "rpe_threshold": rpe_threshold,
        }
        if out_dir is not None:
            out_dir = Path(out_dir)
            write_jsonl(out_dir / "dsyn.jsonl", (r.to_json() for r in kept))
            manifest["records_path"] = "dsyn.jsonl"
            (out_dir / "dsyn_manifest.json").write_text(
                json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
            )
        return manifest, kept


def load_corpus_images(paths: Iterable[str | Path], store: ImageStore) -> list[ChartRecord]:
    """Ingest raw image files into the store as external-corpus records."""
    records = []
    for path in paths:
        data = Path(path).read_bytes()
        key = store.put(data)
        records.append(ChartRecord.for_image(data, key))
    return records
