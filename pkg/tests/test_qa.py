"""Truth-anchored QA synthesis tests."""

from __future__ import annotations

import sys
from fractions import Fraction

import pytest

from chartforge.broker import ExecutionBroker
from chartforge.errors import InvalidInputError, SynthesisParseError
from chartforge.gateway import EndpointConfig, Gateway, RetryPolicy
from chartforge.ledger import RunLedger
from chartforge.mocking import mock_backend
from chartforge.prompt_catalog import PromptCatalog
from chartforge.qa import (
    QaForge,
    bucket,
    emit_datasets,
    extract_tag,
    fail_rate,
    judge_matcher,
    match,
    validate_outputs,
)
from chartforge.records import ChartRecord, CotTrace, QaCandidate, qa_id_for, read_jsonl, write_jsonl
from chartforge.store import ImageStore
from chartforge.stub_worker import make_png

STUB_CMD = [sys.executable, "-m", "chartforge.stub_worker"]

# Distinctive phrases identifying each stage prompt in mock rules.
SCRIPT_KEY = "Algorithmic Synthesis"
QUESTION_KEY = "Reverse-Engineering"
CONSISTENCY_KEY = "Chart Code Comprehension"
DISTILL_KEY = "high-quality example to train"


@pytest.fixture(scope="module")
def broker():
    with ExecutionBroker(STUB_CMD, pool_size=2) as b:
        yield b


def endpoint():
    return EndpointConfig(base_url="mock://qa", model_id="qa-model", retry=RetryPolicy(1, 1, 1))


def make_qa(tmp_path, broker, rules):
    backend = mock_backend(rules)
    gateway = Gateway(transport=backend, sleep=lambda s: None)
    store = ImageStore(tmp_path / "store")
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    forge = QaForge(
        gateway,
        broker,
        store,
        ledger,
        PromptCatalog(),
        qa_endpoint=endpoint(),
        distill_endpoint=endpoint(),
    )
    return forge, backend, store, ledger


def chart_record(store, code="data = [1, 2, 3]\n#: png 9 9\n"):
    img = make_png(9, 9, seed=1)
    rec = ChartRecord.for_code(code, "coder_sample")
    rec.image_ref = store.put(img)
    return rec


SCRIPT_BODY = "#: print 0.75\nvalues = [1, 2, 3]\nprint(0.75)"
SCRIPT_RESPONSE = f"Blueprint first.\n<answer>{SCRIPT_BODY}</answer>"
QUESTION_RESPONSE = "1. Logic.\n<question>Which region wins?</question>"


def consistency_response(answer="0.750"):
    return f"Reasoning...\nTherefore, the final answer is <answer>{answer}</answer>."


def trace_response(answer, words=120):
    think = " ".join(f"step{i}" for i in range(words))
    return f"<think>{think}</think>\nTherefore, the final answer is <answer>{answer}</answer>."


class TestMatch:
    def test_numeric_trailing_zero(self):
        assert match("5.20", "5.2")

    def test_case_and_whitespace(self):
        assert match("Region  A", "region a")

    def test_numeric_rejects_beyond_tolerance(self):
        assert not match("5.2", "5.3")

    def test_relative_tolerance(self):
        assert match("1000000", "1000001")  # rel diff 1e-6 < 1e-4
        assert not match("1000000", "1001000")

    def test_identical_units(self):
        assert match("5.2 m/s", "5.20 m/s")
        assert not match("5.2 m", "5.2 s")

    def test_scientific_notation(self):
        assert match("1.5e3", "1500")

    def test_symmetry_and_reflexivity(self):
        pairs = [("5.20", "5.2"), ("a b", "A  B"), ("x", "y"), ("0", "0.0000000001")]
        for a, b in pairs:
            assert match(a, b) == match(b, a)
            assert match(a, a) and match(b, b)

    def test_near_zero_absolute_tolerance(self):
        assert match("0", "0.0")
        assert not match("0", "0.1")


class TestJudgeMatcher:
    def _judge(self, rules):
        backend = mock_backend(rules)
        gateway = Gateway(transport=backend, sleep=lambda s: None)
        return judge_matcher(gateway, endpoint()), backend

    def test_judge_verdicts(self):
        judge, backend = self._judge(
            [
                {"match": {"substring": "equivalent"}, "respond": {"texts": ["<answer>YES</answer>"]}, "repeat": 1},
                {"match": {"substring": "equivalent"}, "respond": {"texts": ["<answer>NO</answer>"]}},
            ]
        )
        assert judge("approximately 5", "5") is True
        assert judge("apples", "oranges") is False
        first = backend.chat_requests()[0].text
        assert "Answer 1: approximately 5" in first and "Answer 2: 5" in first

    def test_judge_falls_back_to_deterministic_matcher(self):
        judge, _ = self._judge([{"match": {"substring": ""}, "respond": {"http_status": 500}}])
        assert judge("5.20", "5.2") is True  # deterministic fallback
        assert judge("5.2", "9") is False

    def test_forge_accepts_custom_matcher(self, tmp_path, broker):
        rules = [
            {"match": {"substring": CONSISTENCY_KEY}, "respond": {"texts": [consistency_response("anything")]}},
        ]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        forge.matcher = lambda a, b: True
        _, consistent = forge.consistency_check("code", "q", "0.75")
        assert consistent


class TestExtractTag:
    def test_last_occurrence_wins(self):
        text = "<answer>draft</answer> ... <answer>final</answer>"
        assert extract_tag(text, "answer") == "final"

    def test_absent(self):
        assert extract_tag("no tags here", "answer") is None

    def test_multiline(self):
        assert extract_tag("<answer>line1\nline2</answer>", "answer") == "line1\nline2"


class TestSynthSteps:
    def test_script_extracted_verbatim(self, tmp_path, broker):
        rules = [{"match": {"substring": SCRIPT_KEY}, "respond": {"texts": [SCRIPT_RESPONSE]}}]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        assert forge.gen_answer_script("code") == SCRIPT_BODY

    def test_untagged_script_raises(self, tmp_path, broker):
        rules = [{"match": {"substring": SCRIPT_KEY}, "respond": {"texts": ["no tags"]}}]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        with pytest.raises(SynthesisParseError):
            forge.gen_answer_script("code")

    def test_ground_truth_via_stub(self, tmp_path, broker):
        forge, _, _, _ = make_qa(tmp_path, broker, [])
        assert forge.ground_truth(SCRIPT_BODY) == "0.75"

    def test_question_placeholders_substituted(self, tmp_path, broker):
        rules = [{"match": {"substring": QUESTION_KEY}, "respond": {"texts": [QUESTION_RESPONSE]}}]
        forge, backend, _, _ = make_qa(tmp_path, broker, rules)
        question = forge.gen_question("CHART_CODE_SENTINEL", "SCRIPT_SENTINEL")
        assert question == "Which region wins?"
        outbound = backend.chat_requests()[0].text
        assert "CHART_CODE_SENTINEL" in outbound and "SCRIPT_SENTINEL" in outbound
        assert "{chart code}" not in outbound and "{generated_python_code}" not in outbound

    def test_consistency_numeric_normalization(self, tmp_path, broker):
        rules = [
            {"match": {"substring": CONSISTENCY_KEY}, "respond": {"texts": [consistency_response("0.750")]}},
        ]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        answer, consistent = forge.consistency_check("code", "q", "0.75")
        assert answer == "0.750" and consistent

    def test_consistency_mismatch(self, tmp_path, broker):
        rules = [
            {"match": {"substring": CONSISTENCY_KEY}, "respond": {"texts": [consistency_response("0.8")]}},
        ]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        answer, consistent = forge.consistency_check("code", "q", "0.75")
        assert answer == "0.8" and not consistent

    def test_consistency_missing_tag(self, tmp_path, broker):
        rules = [{"match": {"substring": CONSISTENCY_KEY}, "respond": {"texts": ["nothing tagged"]}}]
        forge, _, _, _ = make_qa(tmp_path, broker, rules)
        answer, consistent = forge.consistency_check("code", "q", "0.75")
        assert answer is None and not consistent


def happy_path_rules(consistency_answer="0.75"):
    return [
        {"match": {"substring": SCRIPT_KEY}, "respond": {"texts": [SCRIPT_RESPONSE]}},
        {"match": {"substring": QUESTION_KEY}, "respond": {"texts": [QUESTION_RESPONSE]}},
        {
            "match": {"substring": CONSISTENCY_KEY},
            "respond": {"texts": [consistency_response(consistency_answer)]},
        },
    ]


class TestSynthCandidates:
    def test_two_scripts_per_chart_distinct_ids(self, tmp_path, broker):
        forge, backend, store, _ = make_qa(tmp_path, broker, happy_path_rules())
        record = chart_record(store)
        candidates = forge.synth_candidates([record], scripts_per_chart=2)
        assert len(candidates) == 2
        assert candidates[0].qa_id == qa_id_for(record.chart_id, 0)
        assert candidates[1].qa_id == qa_id_for(record.chart_id, 1)
        assert candidates[0].qa_id != candidates[1].qa_id
        assert all(c.consistent and c.answer_py == "0.75" for c in candidates)

    def test_logic_phase_is_text_only(self, tmp_path, broker):
        forge, backend, store, _ = make_qa(tmp_path, broker, happy_path_rules())
        forge.synth_candidates([chart_record(store)], scripts_per_chart=1)
        assert backend.chat_requests(), "no requests recorded"
        assert all(not r.has_image for r in backend.chat_requests())

    def test_inconsistent_candidate_dropped(self, tmp_path, broker):
        forge, _, store, ledger = make_qa(tmp_path, broker, happy_path_rules("0.8"))
        assert forge.synth_candidates([chart_record(store)], scripts_per_chart=1) == []
        causes = [e.cause for e in ledger.events() if e.action == "dropped"]
        assert causes == ["inconsistent"]

    def test_script_timeout_rejected(self, tmp_path, broker):
        rules = [
            {
                "match": {"substring": SCRIPT_KEY},
                "respond": {"texts": ["<answer>#: sleep 9</answer>"]},
            },
        ]
        forge, _, store, ledger = make_qa(tmp_path, broker, rules)
        forge.script_timeout_s = 0.5
        assert forge.synth_candidates([chart_record(store)], scripts_per_chart=1) == []
        causes = [e.cause for e in ledger.events() if e.action == "dropped"]
        assert causes == ["ground_truth:timeout"]

    def test_empty_script_print_rejected_as_protocol(self, tmp_path, broker):
        rules = [
            {"match": {"substring": SCRIPT_KEY}, "respond": {"texts": ["<answer>#: noop</answer>"]}},
        ]
        forge, _, store, ledger = make_qa(tmp_path, broker, rules)
        assert forge.synth_candidates([chart_record(store)], scripts_per_chart=1) == []
        causes = [e.cause for e in ledger.events() if e.action == "dropped"]
        assert causes == ["ground_truth:protocol"]


class TestDistill:
    def test_traces_and_flags(self, tmp_path, broker):
        rules = happy_path_rules() + [
            {
                "match": {"substring": DISTILL_KEY},
                "respond": {
                    "texts": [trace_response("0.75"), trace_response("0.7500"), trace_response("0.9")]
                },
            },
        ]
        forge, backend, store, _ = make_qa(tmp_path, broker, rules)
        candidates = forge.synth_candidates([chart_record(store)], scripts_per_chart=1)
        distilled = forge.distill_candidates(candidates, traces=3)
        flags = [t.matches_gt for t in distilled[0].traces]
        assert flags == [True, True, False]
        assert distilled[0].fail_rate == Fraction(1, 3)
        distill_requests = [r for r in backend.chat_requests() if DISTILL_KEY in r.text]
        assert len(distill_requests) == 3
        assert all(r.has_image for r in distill_requests)

    def test_missing_answer_tag_counts_as_miss(self, tmp_path, broker):
        rules = happy_path_rules() + [
            {
                "match": {"substring": DISTILL_KEY},
                "respond": {"texts": ["<think>thinking</think> but no answer tag"]},
            },
        ]
        forge, _, store, _ = make_qa(tmp_path, broker, rules)
        candidates = forge.synth_candidates([chart_record(store)], scripts_per_chart=1)
        distilled = forge.distill_candidates(candidates, traces=3)
        assert distilled[0].fail_rate == Fraction(1, 1)
        assert all(t.extracted_answer is None for t in distilled[0].traces)

    def test_transport_failure_is_extraction_failed(self, tmp_path, broker):
        rules = happy_path_rules() + [
            {"match": {"substring": DISTILL_KEY}, "respond": {"http_status": 500}, "repeat": 1},
            {"match": {"substring": DISTILL_KEY}, "respond": {"texts": [trace_response("0.75")]}},
        ]
        forge, _, store, _ = make_qa(tmp_path, broker, rules)
        candidates = forge.synth_candidates([chart_record(store)], scripts_per_chart=1)
        distilled = forge.distill_candidates(candidates, traces=3)
        assert [t.matches_gt for t in distilled[0].traces] == [False, True, True]
        assert distilled[0].fail_rate == Fraction(1, 3)


def make_trace(matches: bool, answer_py="GT"):
    answer = answer_py if matches else "WRONG"
    return CotTrace(trace_response(answer), answer, matches, 10)


def make_candidate(qa_id, pattern, answer_py="GT", consistent=True):
    cand = QaCandidate(
        qa_id=qa_id,
        chart_id="chart",
        image_ref="ref",
        script="s",
        answer_py=answer_py,
        question="q?",
        consistency_answer=answer_py if consistent else "other",
        consistent=consistent,
    )
    cand.traces = [make_trace(m, answer_py) for m in pattern]
    cand.fail_rate = fail_rate(cand.traces, answer_py)
    return cand


class TestFailRate:
    def test_exact_rationals(self):
        answer = "GT"
        for pattern, expected in [
            ((True, True, True), Fraction(0)),
            ((True, True, False), Fraction(1, 3)),
            ((True, False, False), Fraction(2, 3)),
            ((False, False, False), Fraction(1)),
        ]:
            traces = [make_trace(m) for m in pattern]
            assert fail_rate(traces, answer) == expected

    def test_trace_count_enforced(self):
        with pytest.raises(InvalidInputError):
            fail_rate([make_trace(True)], "GT")

    def test_all_patterns_have_exact_denominator(self):
        for bits in range(8):
            pattern = [(bits >> i) & 1 == 1 for i in range(3)]
            r = fail_rate([make_trace(m) for m in pattern], "GT")
            assert r * 3 == 3 - sum(pattern)


class TestBucket:
    def test_paper_partition(self):
        cands = [
            make_candidate("a", (True, True, True)),    # r=0   -> rejected
            make_candidate("b", (True, True, False)),   # r=1/3 -> sft
            make_candidate("c", (True, False, False)),  # r=2/3 -> rl (quota 1)
            make_candidate("d", (False, False, False)), # r=1   -> rejected
        ]
        part = bucket(cands, rl_quota=1)
        assert [c.qa_id for c in part["rl"]] == ["c"]
        assert [c.qa_id for c in part["sft"]] == ["b"]
        assert sorted(c.qa_id for c in part["rejected"]) == ["a", "d"]

    def test_quota_zero_all_sft(self):
        cands = [make_candidate("a", (True, False, False)), make_candidate("b", (True, True, False))]
        part = bucket(cands, rl_quota=0)
        assert part["rl"] == [] and len(part["sft"]) == 2

    def test_quota_above_retained_all_rl(self):
        cands = [make_candidate("a", (True, False, False)), make_candidate("b", (True, True, False))]
        part = bucket(cands, rl_quota=10)
        assert part["sft"] == [] and len(part["rl"]) == 2

    def test_tie_break_lexicographic(self):
        cands = [make_candidate(q, (True, False, False)) for q in ("z", "a", "m")]
        part = bucket(cands, rl_quota=2)
        assert [c.qa_id for c in part["rl"]] == ["a", "m"]
        assert [c.qa_id for c in part["sft"]] == ["z"]

    def test_inconsistent_rejected(self):
        cand = make_candidate("x", (True, True, False), consistent=False)
        part = bucket([cand], rl_quota=0)
        assert part["rejected"] == [cand] and cand.reject_cause == "inconsistent"

    def test_sft_carries_first_matching_trace(self):
        cand = make_candidate("x", (False, True, True))
        part = bucket([cand], rl_quota=0)
        assert part["sft"][0].sft_trace_index == 1

    def test_trace_filter_can_reject(self):
        cand = make_candidate("x", (True, True, False))
        part = bucket([cand], rl_quota=0, trace_ok=lambda c, i: False)
        assert part["rejected"] == [cand] and cand.reject_cause == "trace_filtered"

    def test_exhaustive_patterns(self):
        for bits in range(8):
            pattern = tuple((bits >> i) & 1 == 1 for i in range(3))
            cand = make_candidate("x", pattern)
            part = bucket([cand], rl_quota=0)
            matches = sum(pattern)
            if matches in (0, 3):
                assert part["rejected"] == [cand]
            else:
                assert part["sft"] == [cand]


class TestValidator:
    def _emit(self, tmp_path):
        cands = [
            make_candidate("rl1", (True, False, False)),
            make_candidate("sft1", (True, True, False)),
        ]
        part = bucket(cands, rl_quota=1)
        return emit_datasets(part, tmp_path)

    def test_clean_outputs_have_zero_violations(self, tmp_path):
        sft_path, rl_path = self._emit(tmp_path)
        assert validate_outputs(sft_path, rl_path) == []

    def test_corrupted_answer_is_caught(self, tmp_path):
        sft_path, rl_path = self._emit(tmp_path)
        rows = list(read_jsonl(sft_path))
        rows[0]["answer"] = "CORRUPTED"
        write_jsonl(sft_path, rows)
        violations = validate_outputs(sft_path, rl_path)
        assert violations and any("sft1" in v for v in violations)

    def test_corrupted_fail_rate_is_caught(self, tmp_path):
        sft_path, rl_path = self._emit(tmp_path)
        rows = list(read_jsonl(rl_path))
        rows[0]["fail_rate"] = "1"
        write_jsonl(rl_path, rows)
        violations = validate_outputs(sft_path, rl_path)
        assert any("outside (0, 1)" in v for v in violations)
