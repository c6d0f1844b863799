"""Truth-anchored inverse QA synthesis.

The answer comes first: a generated analysis script runs in the sandbox
to produce the ground truth, the question is reverse-synthesized from
chart code + script, and a text-only consistency pass must reproduce the
executed answer before a candidate survives.  Reasoning traces are then
distilled against the chart image, the per-question fail rate is an
exact rational over the trace count, and candidates are partitioned
into RL / SFT / rejected pools.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .broker import ExecutionBroker
from .errors import (
    ExecutionFailedError,
    GatewayProtocolError,
    InvalidInputError,
    SynthesisParseError,
    TransportError,
    WorkerProtocolError,
)
from .gateway import (
    REASONING_SAMPLING,
    ChatRequest,
    EndpointConfig,
    Gateway,
    ImagePart,
    Message,
    TextPart,
)
from .ledger import RunLedger
from .prompt_catalog import PromptCatalog
from .records import ChartRecord, CotTrace, QaCandidate, qa_id_for, read_jsonl, write_jsonl
from .store import ImageStore

logger = logging.getLogger(__name__)

DEFAULT_SCRIPTS_PER_CHART = 2
DEFAULT_TRACES = 3

_NUMBER_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*(.*)$")
_REL_TOL = 1e-4
_ABS_TOL = 1e-9


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().casefold())


def match(a: str, b: str) -> bool:
    """Deterministic answer matcher: normalized text, numeric-aware.

    Both sides are trimmed, case-folded and whitespace-collapsed.  When
    both parse as a number with an identical unit suffix, they compare
    with relative tolerance 1e-4 (absolute 1e-9 near zero); otherwise
    the normalized strings must be equal.
    """
    na, nb = _normalize(a), _normalize(b)
    ma, mb = _NUMBER_RE.match(na), _NUMBER_RE.match(nb)
    if ma and mb and ma.group(2) == mb.group(2):
        return math.isclose(float(ma.group(1)), float(mb.group(1)), rel_tol=_REL_TOL, abs_tol=_ABS_TOL)
    return na == nb


def extract_tag(text: str, tag: str) -> str | None:
    """Content of the last <tag>...</tag> occurrence, stripped; None if absent."""
    found = re.findall(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL)
    return found[-1].strip() if found else None


_JUDGE_PROMPT = """Decide whether two answers to the same chart question are equivalent.
Treat numeric values as equal when they agree up to rounding; ignore case,
whitespace and phrasing differences.  Reply with exactly one word inside
<answer>...</answer>: YES if equivalent, NO otherwise.

Answer 1: {first}
Answer 2: {second}
"""


def judge_matcher(gateway: Gateway, endpoint: EndpointConfig, sampling: dict | None = None) -> Callable[[str, str], bool]:
    """Answer matcher backed by a judge endpoint, same interface as match().

    Falls back to the deterministic matcher when the judge response is
    missing or unparsable, so a flaky judge can only widen agreement.
    """
    params = {"temperature": 0.0} if sampling is None else sampling

    def judge(a: str, b: str) -> bool:
        prompt = _JUDGE_PROMPT.replace("{first}", a).replace("{second}", b)
        try:
            completion = gateway.chat(
                endpoint, ChatRequest(messages=(Message.text("user", prompt),), **params)
            )[0]
        except (TransportError, GatewayProtocolError) as exc:
            logger.warning("judge endpoint failed (%s); using deterministic matcher", exc)
            return match(a, b)
        verdict = extract_tag(completion, "answer")
        if verdict is None:
            return match(a, b)
        return verdict.strip().upper() == "YES"

    return judge


def fail_rate(
    traces: Sequence[CotTrace],
    answer_py: str,
    expected: int = DEFAULT_TRACES,
    matcher: Callable[[str, str], bool] = match,
) -> Fraction:
    """Fraction of traces whose extracted answer misses the ground truth.

    Recomputed from the extracted answers (an extraction failure counts
    as a miss) so the rate is an exact rational with denominator
    ``expected``.
    """
    if len(traces) != expected:
        raise InvalidInputError(f"fail_rate: expected {expected} traces, got {len(traces)}")
    matches = sum(
        1 for t in traces if t.extracted_answer is not None and matcher(t.extracted_answer, answer_py)
    )
    return Fraction(expected - matches, expected)


def bucket(
    candidates: Sequence[QaCandidate],
    rl_quota: int,
    trace_ok: Callable[[QaCandidate, int], bool] | None = None,
) -> dict[str, list[QaCandidate]]:
    """Partition candidates into {rl, sft, rejected}.

    Rejected: inconsistent candidates and those with fail rate 0 or 1.
    Among the rest, the ``rl_quota`` highest fail rates go to RL (ties
    broken by qa_id), the remainder to SFT carrying the first matching
    trace (the first matching trace that also passes ``trace_ok`` when a
    trace filter is supplied; with none left the candidate is rejected).
    """
    retained: list[QaCandidate] = []
    out: dict[str, list[QaCandidate]] = {"rl": [], "sft": [], "rejected": []}
    for cand in candidates:
        if not cand.consistent or cand.fail_rate is None or cand.fail_rate in (0, 1):
            cand.bucket = "rejected"
            if cand.reject_cause is None:
                cand.reject_cause = (
                    "inconsistent"
                    if not cand.consistent
                    else ("undistilled" if cand.fail_rate is None else f"fail_rate={cand.fail_rate}")
                )
            out["rejected"].append(cand)
        else:
            retained.append(cand)
    retained.sort(key=lambda c: (-c.fail_rate, c.qa_id))
    for position, cand in enumerate(retained):
        if position < rl_quota:
            cand.bucket = "rl"
            out["rl"].append(cand)
            continue
        matching = [i for i, t in enumerate(cand.traces) if t.matches_gt]
        assert matching, f"candidate {cand.qa_id} retained with no matching trace"
        usable = [i for i in matching if trace_ok is None or trace_ok(cand, i)]
        if not usable:
            cand.bucket = "rejected"
            cand.reject_cause = "trace_filtered"
            out["rejected"].append(cand)
            continue
        cand.bucket = "sft"
        cand.sft_trace_index = usable[0]
        out["sft"].append(cand)
    return out


class QaForge:
    def __init__(
        self,
        gateway: Gateway,
        broker: ExecutionBroker,
        store: ImageStore,
        ledger: RunLedger,
        prompts: PromptCatalog,
        *,
        qa_endpoint: EndpointConfig,
        distill_endpoint: EndpointConfig,
        sampling: dict | None = None,
        script_timeout_s: float = 60.0,
        max_workers: int = 1,
        matcher: Callable[[str, str], bool] | None = None,
    ):
        self.gateway = gateway
        self.broker = broker
        self.store = store
        self.ledger = ledger
        self.prompts = prompts
        self.qa_endpoint = qa_endpoint
        self.distill_endpoint = distill_endpoint
        self.sampling = dict(REASONING_SAMPLING) if sampling is None else sampling
        self.script_timeout_s = script_timeout_s
        self.max_workers = max_workers
        self.matcher = matcher or match
        # Incremental writer called for each retained candidate just
        # before its terminal ledger line (see ChartForge.on_retained).
        self.on_retained: Callable[[QaCandidate], None] | None = None

    def _chat_text(self, endpoint: EndpointConfig, prompt: str) -> str:
        request = ChatRequest(messages=(Message.text("user", prompt),), **self.sampling)
        return self.gateway.chat(endpoint, request)[0]

    # -- single-step operations ----------------------------------------------

    def gen_answer_script(self, code: str) -> str:
        prompt = self.prompts.render("qa_script", {"chart code": code})
        completion = self._chat_text(self.qa_endpoint, prompt)
        script = extract_tag(completion, "answer")
        if script is None:
            raise SynthesisParseError("script generation returned no <answer> tags")
        return script

    def ground_truth(self, script: str) -> str:
        return self.broker.run_script(script, self.script_timeout_s, task_id="gt")

    def gen_question(self, code: str, script: str) -> str:
        prompt = self.prompts.render(
            "qa_question", {"chart code": code, "generated_python_code": script}
        )
        completion = self._chat_text(self.qa_endpoint, prompt)
        question = extract_tag(completion, "question")
        if question is None:
            raise SynthesisParseError("question synthesis returned no <question> tags")
        return question

    def consistency_check(self, code: str, question: str, answer_py: str) -> tuple[str | None, bool]:
        prompt = self.prompts.render(
            "qa_consistency", {"chart code": code, "generated_question": question}
        )
        completion = self._chat_text(self.qa_endpoint, prompt)
        answer = extract_tag(completion, "answer")
        return answer, (answer is not None and self.matcher(answer, answer_py))

    def distill_traces(self, image_bytes: bytes, question: str, answer_py: str, n: int = DEFAULT_TRACES) -> list[CotTrace]:
        """n reasoning completions over the rendered image; failures count as misses."""
        prompt = self.prompts.render("cot_distill", {"question": question})
        message = Message("user", (TextPart(prompt), ImagePart(image_bytes)))
        request = ChatRequest(messages=(message,), **self.sampling)
        traces: list[CotTrace] = []
        for _ in range(n):
            try:
                completion = self.gateway.chat(self.distill_endpoint, request)[0]
            except (TransportError, GatewayProtocolError) as exc:
                logger.debug("distillation call failed: %s", exc)
                traces.append(CotTrace("", None, False, 0))
                continue
            extracted = extract_tag(completion, "answer")
            traces.append(
                CotTrace(
                    raw_text=completion,
                    extracted_answer=extracted,
                    matches_gt=extracted is not None and self.matcher(extracted, answer_py),
                    token_estimate=len(completion.split()),
                )
            )
        return traces

    # -- pipeline stages -------------------------------------------------------

    def synth_candidates(
        self,
        chart_records: Sequence[ChartRecord],
        scripts_per_chart: int = DEFAULT_SCRIPTS_PER_CHART,
        stage: str = "qa-synth",
        skip_qa_ids: set[str] | None = None,
    ) -> list[QaCandidate]:
        """Script -> execute -> question -> consistency, per chart and script slot.

        Only consistent candidates survive; every (chart, slot) pair
        gets a terminal ledger action.  ``skip_qa_ids`` names slots
        already terminal in the ledger (resume).
        """
        skip_qa_ids = skip_qa_ids or set()
        items = [
            (record, index)
            for record in chart_records
            for index in range(scripts_per_chart)
            if qa_id_for(record.chart_id, index) not in skip_qa_ids
        ]

        def work(item: tuple[ChartRecord, int]) -> tuple[QaCandidate | None, str, str]:
            record, index = item
            qa_id = qa_id_for(record.chart_id, index)
            cand = QaCandidate(qa_id=qa_id, chart_id=record.chart_id, image_ref=record.image_ref)
            try:
                cand.script = self.gen_answer_script(record.code)
            except SynthesisParseError:
                return None, "dropped", "script_parse"
            except (TransportError, GatewayProtocolError) as exc:
                return None, "failed", f"transport: {exc}"
            try:
                cand.answer_py = self.ground_truth(cand.script)
            except ExecutionFailedError as exc:
                return None, "dropped", f"ground_truth:{exc.status}"
            except WorkerProtocolError:
                return None, "dropped", "ground_truth:protocol"
            try:
                cand.question = self.gen_question(record.code, cand.script)
            except SynthesisParseError:
                return None, "dropped", "question_parse"
            except (TransportError, GatewayProtocolError) as exc:
                return None, "failed", f"transport: {exc}"
            try:
                cand.consistency_answer, cand.consistent = self.consistency_check(
                    record.code, cand.question, cand.answer_py
                )
            except (TransportError, GatewayProtocolError) as exc:
                return None, "failed", f"transport: {exc}"
            if not cand.consistent:
                cause = "consistency_missing_tag" if cand.consistency_answer is None else "inconsistent"
                return cand, "dropped", cause
            return cand, "retained", "consistent"

        out: list[QaCandidate] = []
        for (record, index), (cand, action, cause) in self._map_ordered(items, work):
            if action == "retained" and cand is not None and self.on_retained is not None:
                self.on_retained(cand)
            self.ledger.append(stage, qa_id_for(record.chart_id, index), action, cause)
            if action == "retained" and cand is not None:
                out.append(cand)
        return out

    def distill_candidates(
        self,
        candidates: Sequence[QaCandidate],
        traces: int = DEFAULT_TRACES,
        stage: str = "cot-distill",
    ) -> list[QaCandidate]:
        """Attach reasoning traces and the exact fail rate to each candidate."""

        def work(cand: QaCandidate) -> QaCandidate:
            image_bytes = self.store.get(cand.image_ref)
            cand.traces = self.distill_traces(image_bytes, cand.question, cand.answer_py, traces)
            cand.fail_rate = fail_rate(cand.traces, cand.answer_py, expected=traces, matcher=self.matcher)
            return cand

        out: list[QaCandidate] = []
        for cand, distilled in self._map_ordered(list(candidates), work):
            if self.on_retained is not None:
                self.on_retained(distilled)
            self.ledger.append(stage, cand.qa_id, "retained", f"fail_rate={distilled.fail_rate}")
            out.append(distilled)
        return out

    def _map_ordered(self, items, fn):
        if self.max_workers <= 1 or len(items) <= 1:
            for item in items:
                yield item, fn(item)
            return
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            yield from zip(items, pool.map(fn, items))


# -- dataset emission and the independent validator ---------------------------


def _provenance(cand: QaCandidate) -> dict:
    return {
        "qa_id": cand.qa_id,
        "chart_id": cand.chart_id,
        "consistency_answer": cand.consistency_answer,
        "trace_answers": [t.extracted_answer for t in cand.traces],
    }


def emit_datasets(
    partition: dict[str, list[QaCandidate]],
    out_dir: str | Path,
    ledger: RunLedger | None = None,
    stage: str = "bucket",
    ledger_skip: set[str] | None = None,
) -> tuple[Path, Path]:
    """Write sft.jsonl / rl.jsonl from a bucket partition."""
    out_dir = Path(out_dir)
    sft_rows = []
    for cand in partition["sft"]:
        trace = cand.traces[cand.sft_trace_index]
        sft_rows.append(
            {
                "image_ref": cand.image_ref,
                "question": cand.question,
                "answer": cand.answer_py,
                "cot_trace": trace.raw_text,
                "cot_answer": trace.extracted_answer,
                "fail_rate": str(cand.fail_rate),
                "provenance": _provenance(cand),
            }
        )
    rl_rows = [
        {
            "image_ref": cand.image_ref,
            "question": cand.question,
            "answer": cand.answer_py,
            "fail_rate": str(cand.fail_rate),
            "provenance": _provenance(cand),
        }
        for cand in partition["rl"]
    ]
    sft_path = out_dir / "sft.jsonl"
    rl_path = out_dir / "rl.jsonl"
    write_jsonl(sft_path, sft_rows)
    write_jsonl(rl_path, rl_rows)
    if ledger is not None:
        skip = ledger_skip or set()
        for name in ("rl", "sft"):
            for cand in partition[name]:
                if cand.qa_id not in skip:
                    ledger.append(stage, cand.qa_id, "retained", name)
        for cand in partition["rejected"]:
            if cand.qa_id not in skip:
                ledger.append(stage, cand.qa_id, "dropped", cand.reject_cause or "rejected")
    return sft_path, rl_path


def validate_outputs(sft_path: str | Path, rl_path: str | Path, traces: int = DEFAULT_TRACES) -> list[str]:
    """Re-check anchor soundness of emitted datasets, independent of the pipeline.

    Verifies, from the files alone: the consistency answer still matches
    the executed answer, the fail rate equals the rate recomputed from
    the trace answers, it lies strictly between 0 and 1, and each SFT
    row's supervising trace answer matches the ground truth.  Returns a
    list of human-readable violations (empty = sound).
    """
    violations: list[str] = []

    def check_common(row: dict, origin: str) -> None:
        qa_id = row.get("provenance", {}).get("qa_id", "<unknown>")
        answer = row.get("answer")
        consistency = row.get("provenance", {}).get("consistency_answer")
        if answer is None or consistency is None or not match(consistency, answer):
            violations.append(f"{origin}:{qa_id}: consistency answer does not match ground truth")
        try:
            rate = Fraction(row["fail_rate"])
        except (KeyError, ValueError, ZeroDivisionError):
            violations.append(f"{origin}:{qa_id}: unparsable fail_rate")
            return
        if not (0 < rate < 1):
            violations.append(f"{origin}:{qa_id}: fail_rate {rate} outside (0, 1)")
        trace_answers = row.get("provenance", {}).get("trace_answers", [])
        if len(trace_answers) == traces and answer is not None:
            matches = sum(1 for t in trace_answers if t is not None and match(t, answer))
            if Fraction(traces - matches, traces) != rate:
                violations.append(f"{origin}:{qa_id}: fail_rate {rate} disagrees with trace answers")
        else:
            violations.append(f"{origin}:{qa_id}: expected {traces} trace answers")

    for row in read_jsonl(sft_path):
        check_common(row, "sft")
        qa_id = row.get("provenance", {}).get("qa_id", "<unknown>")
        cot_answer = row.get("cot_answer")
        if cot_answer is None or row.get("answer") is None or not match(cot_answer, row["answer"]):
            violations.append(f"sft:{qa_id}: supervising trace answer does not match ground truth")
    for row in read_jsonl(rl_path):
        check_common(row, "rl")
    return violations
