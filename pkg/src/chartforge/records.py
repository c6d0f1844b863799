"""Pipeline record types and JSONL persistence.

Records serialize with a fixed key order and default float formatting
(shortest round-trip repr) so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator

from .entropy import RpeScore
from .gateway import EmbeddingVector


def content_hash(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False)


@dataclass
class ChartRecord:
    """One chart moving through the pipeline, keyed by content hash."""

    chart_id: str
    source: str
    code: str | None = None
    image_ref: str | None = None
    embedding: EmbeddingVector | None = None
    rpe: RpeScore | None = None
    max_sim_to_hard: float | None = None
    iteration: int = 0
    flags: list[str] = field(default_factory=list)

    @staticmethod
    def for_code(code: str, source: str, iteration: int = 0) -> "ChartRecord":
        return ChartRecord(chart_id=content_hash(code), source=source, code=code, iteration=iteration)

    @staticmethod
    def for_image(image_bytes: bytes, image_ref: str) -> "ChartRecord":
        return ChartRecord(chart_id=content_hash(image_bytes), source="external_corpus", image_ref=image_ref)

    def to_json(self) -> dict:
        return {
            "chart_id": self.chart_id,
            "source": self.source,
            "code": self.code,
            "image_ref": self.image_ref,
            "embedding": (
                None
                if self.embedding is None
                else {"model_id": self.embedding.model_id, "values": list(self.embedding.values)}
            ),
            "rpe": None if self.rpe is None else self.rpe.to_json(),
            "max_sim_to_hard": self.max_sim_to_hard,
            "iteration": self.iteration,
            "flags": list(self.flags),
        }

    @staticmethod
    def from_json(obj: dict) -> "ChartRecord":
        emb = obj.get("embedding")
        rpe_obj = obj.get("rpe")
        return ChartRecord(
            chart_id=obj["chart_id"],
            source=obj["source"],
            code=obj.get("code"),
            image_ref=obj.get("image_ref"),
            embedding=None if emb is None else EmbeddingVector(tuple(emb["values"]), emb["model_id"]),
            rpe=None if rpe_obj is None else RpeScore.from_json(rpe_obj),
            max_sim_to_hard=obj.get("max_sim_to_hard"),
            iteration=obj.get("iteration", 0),
            flags=list(obj.get("flags", [])),
        )


@dataclass
class CotTrace:
    raw_text: str
    extracted_answer: str | None
    matches_gt: bool
    token_estimate: int

    def to_json(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "extracted_answer": self.extracted_answer,
            "matches_gt": self.matches_gt,
            "token_estimate": self.token_estimate,
        }

    @staticmethod
    def from_json(obj: dict) -> "CotTrace":
        return CotTrace(
            raw_text=obj["raw_text"],
            extracted_answer=obj.get("extracted_answer"),
            matches_gt=bool(obj["matches_gt"]),
            token_estimate=int(obj["token_estimate"]),
        )


def qa_id_for(chart_id: str, script_index: int) -> str:
    return content_hash(f"{chart_id}:{script_index}")


@dataclass
class QaCandidate:
    """One question/answer unit anchored to an executed script result."""

    qa_id: str
    chart_id: str
    image_ref: str | None = None
    script: str | None = None
    answer_py: str | None = None
    question: str | None = None
    consistency_answer: str | None = None
    consistent: bool | None = None
    reject_cause: str | None = None
    traces: list[CotTrace] = field(default_factory=list)
    fail_rate: Fraction | None = None
    bucket: str | None = None
    sft_trace_index: int | None = None

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "chart_id": self.chart_id,
            "image_ref": self.image_ref,
            "script": self.script,
            "answer_py": self.answer_py,
            "question": self.question,
            "consistency_answer": self.consistency_answer,
            "consistent": self.consistent,
            "reject_cause": self.reject_cause,
            "traces": [t.to_json() for t in self.traces],
            "fail_rate": None if self.fail_rate is None else str(self.fail_rate),
            "bucket": self.bucket,
            "sft_trace_index": self.sft_trace_index,
        }

    @staticmethod
    def from_json(obj: dict) -> "QaCandidate":
        fr = obj.get("fail_rate")
        return QaCandidate(
            qa_id=obj["qa_id"],
            chart_id=obj["chart_id"],
            image_ref=obj.get("image_ref"),
            script=obj.get("script"),
            answer_py=obj.get("answer_py"),
            question=obj.get("question"),
            consistency_answer=obj.get("consistency_answer"),
            consistent=obj.get("consistent"),
            reject_cause=obj.get("reject_cause"),
            traces=[CotTrace.from_json(t) for t in obj.get("traces", [])],
            fail_rate=None if fr is None else Fraction(fr),
            bucket=obj.get("bucket"),
            sft_trace_index=obj.get("sft_trace_index"),
        )


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
