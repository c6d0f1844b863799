"""Chart pipeline stage tests against the scripted mock and stub worker."""

from __future__ import annotations

import math
import sys

import pytest

from chartforge.broker import ExecutionBroker
from chartforge.entropy import RpeScore
from chartforge.errors import InvalidInputError
from chartforge.forge import (
    ChartForge,
    HardSeedIndex,
    extract_code,
    load_corpus_images,
    passes_boost_gate,
    passes_hard_gate,
)
from chartforge.gateway import EmbeddingVector, EndpointConfig, Gateway, RetryPolicy
from chartforge.ledger import RunLedger, check_conservation
from chartforge.mocking import mock_backend
from chartforge.prompt_catalog import PromptCatalog
from chartforge.records import ChartRecord, read_jsonl
from chartforge.store import ImageStore
from chartforge.stub_worker import make_png

STUB_CMD = [sys.executable, "-m", "chartforge.stub_worker"]
LN2 = math.log(2.0)

E1, E2, E3, E4 = [1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]


@pytest.fixture(scope="module")
def broker():
    with ExecutionBroker(STUB_CMD, pool_size=2) as b:
        yield b


def ok_code(i=0):
    return f"```python\n#: png {10 + i} 10 {i}\n```"


def fail_code(i=0):
    return f"```python\n#: error boom{i}\n```"


def endpoint(name="mock://x"):
    return EndpointConfig(base_url=name, model_id="m", retry=RetryPolicy(1, 1, 1))


def make_forge(tmp_path, broker, rules, **kwargs):
    backend = mock_backend(rules)
    gateway = Gateway(transport=backend, sleep=lambda s: None)
    store = ImageStore(tmp_path / "store")
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    forge = ChartForge(
        gateway,
        broker,
        store,
        ledger,
        PromptCatalog(),
        rollout_endpoint=endpoint(),
        embed_endpoint=endpoint(),
        **kwargs,
    )
    return forge, backend, store, ledger


def seed_corpus(store, count=1):
    records = []
    for i in range(count):
        data = make_png(12, 12, seed=100 + i)
        records.append(ChartRecord.for_image(data, store.put(data)))
    return records


class TestExtractCode:
    def test_first_fenced_block(self):
        text = "intro\n```python\nimport x\n```\nmore\n```\nsecond\n```"
        assert extract_code(text) == "import x"

    def test_unfenced_with_import(self):
        assert extract_code("import matplotlib\nplot()") == "import matplotlib\nplot()"

    def test_no_code(self):
        assert extract_code("just prose, nothing else") is None


class TestScoreCorpus:
    def test_identical_reconstructions_score_zero(self, tmp_path, broker):
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": [ok_code(1)]}},
            {"match": {"substring": ""}, "respond": {"vectors": [[0.3, 0.4, 0.5]]}},
        ]
        forge, backend, store, ledger = make_forge(tmp_path, broker, rules)
        records = seed_corpus(store)
        scored = forge.score_corpus(records, rollouts=8)
        assert len(scored) == 1
        assert scored[0].rpe.value == 0.0
        assert scored[0].rpe.valid_count == 8
        assert scored[0].embedding is not None

    def test_three_orthonormal_plus_five_failures(self, tmp_path, broker):
        codes = [ok_code(0), fail_code(1), fail_code(2), ok_code(3), fail_code(4), fail_code(5), ok_code(6), fail_code(7)]
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": codes}},
            {"match": {"substring": ""}, "respond": {"vectors": [E4, E1, E2, E3]}},
        ]
        forge, _, store, _ = make_forge(tmp_path, broker, rules)
        scored = forge.score_corpus(seed_corpus(store), rollouts=8)
        assert scored[0].rpe.valid_count == 3
        assert scored[0].rpe.attempted_count == 8
        assert scored[0].rpe.value == pytest.approx(LN2 / 3, abs=1e-9)

    def test_all_renders_fail_gives_sentinel(self, tmp_path, broker):
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": [fail_code()]}},
            {"match": {"substring": ""}, "respond": {"vectors": [E1]}},
        ]
        forge, _, store, _ = make_forge(tmp_path, broker, rules)
        scored = forge.score_corpus(seed_corpus(store), rollouts=8)
        assert scored[0].rpe.is_sentinel

    def test_transport_failure_marks_failed_not_abort(self, tmp_path, broker):
        rules = [
            {"match": {"substring": ""}, "respond": {"http_status": 500}, "repeat": 1},
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": [ok_code()]}},
            {"match": {"substring": ""}, "respond": {"vectors": [E1]}},
        ]
        forge, _, store, ledger = make_forge(tmp_path, broker, rules)
        records = seed_corpus(store, 2)
        scored = forge.score_corpus(records, rollouts=2)
        assert len(scored) == 1
        counts = ledger.counts("score")
        assert counts["failed"] == 1 and counts["retained"] == 1
        check_conservation(ledger, "score", [r.chart_id for r in records])

    def test_low_valid_count_flagged(self, tmp_path, broker):
        codes = [ok_code(0)] + [fail_code(i) for i in range(1, 8)]
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": codes}},
            {"match": {"substring": ""}, "respond": {"vectors": [E1]}},
        ]
        forge, _, store, _ = make_forge(tmp_path, broker, rules)
        scored = forge.score_corpus(seed_corpus(store), rollouts=8)
        assert scored[0].rpe.value == 0.0
        assert "trivial_entropy" in scored[0].flags


class TestFilterHard:
    def _records(self, values):
        out = []
        for i, v in enumerate(values):
            rec = ChartRecord(chart_id=f"c{i}", source="external_corpus")
            rec.rpe = RpeScore(v, 3, 8)
            rec.embedding = EmbeddingVector((1.0, float(i)), "m")
            out.append(rec)
        return out

    def test_threshold_inclusive(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        index, kept = forge.filter_hard(self._records([0.39, 0.40, 0.41]), threshold=0.4)
        assert [r.rpe.value for r in kept] == [0.40, 0.41]
        assert len(index) == 2

    def test_empty_input(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        index, kept = forge.filter_hard([], threshold=0.4)
        assert kept == [] and len(index) == 0

    def test_all_sentinel_kept(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        records = self._records([math.inf, math.inf])
        index, kept = forge.filter_hard(records, threshold=0.4)
        assert len(kept) == 2

    def test_unscored_rejected_with_ids(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        record = ChartRecord(chart_id="raw", source="external_corpus")
        with pytest.raises(InvalidInputError, match="raw"):
            forge.filter_hard([record])


class TestColdStart:
    def test_mixed_success_and_failure(self, tmp_path, broker):
        texts = [ok_code(i) for i in range(7)] + [fail_code(i) for i in range(3)]
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": texts}},
            {"match": {"substring": ""}, "respond": {"vectors": [E1]}},
        ]
        forge, _, store, ledger = make_forge(tmp_path, broker, rules)
        hard = seed_corpus(store, 10)
        cold = forge.cold_start(hard, endpoint())
        assert len(cold) == 7
        assert all(r.source == "cold_start" and r.image_ref for r in cold)
        counts = ledger.counts("cold-start")
        assert counts["retained"] == 7 and counts["dropped"] == 3
        check_conservation(ledger, "cold-start", [r.chart_id for r in hard])


class TestExportCoderSet:
    def test_round_trip_and_verbatim_system_prompt(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        records = [ChartRecord.for_code(f"plot({i})", "cold_start") for i in range(3)]
        out = tmp_path / "coder.jsonl"
        assert forge.export_coder_training_set(records, out) == 3
        rows = list(read_jsonl(out))
        system = PromptCatalog().get("coder_system")
        assert all(row["system"] == system for row in rows)
        assert [row["output"] for row in rows] == [r.code for r in records]

    def test_empty_set(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        out = tmp_path / "empty.jsonl"
        assert forge.export_coder_training_set([], out) == 0
        assert out.read_text() == ""

    def test_missing_code_rejected(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        with pytest.raises(InvalidInputError):
            forge.export_coder_training_set([ChartRecord(chart_id="x", source="cold_start")], tmp_path / "o")


class TestSampleCandidates:
    def test_distinct_codes(self, tmp_path, broker):
        texts = [ok_code(i) for i in range(5)]
        rules = [{"match": {"substring": ""}, "respond": {"texts": texts}}]
        forge, _, _, _ = make_forge(tmp_path, broker, rules)
        records = forge.sample_candidates(endpoint(), count=5, iteration=1)
        assert len(records) == 5
        assert all(r.source == "coder_sample" and r.iteration == 1 for r in records)

    def test_duplicate_codes_collapse(self, tmp_path, broker):
        rules = [{"match": {"substring": ""}, "respond": {"texts": [ok_code(7)]}}]
        forge, _, _, ledger = make_forge(tmp_path, broker, rules)
        records = forge.sample_candidates(endpoint(), count=2)
        assert len(records) == 1
        assert ledger.counts("coder-sample")["dropped"] == 1

    def test_extraction_failure_skipped_with_ledger_entry(self, tmp_path, broker):
        rules = [
            {"match": {"substring": ""}, "respond": {"texts": ["no code here at all"]}, "repeat": 1},
            {"match": {"substring": ""}, "respond": {"texts": [ok_code(1)]}},
        ]
        forge, _, _, ledger = make_forge(tmp_path, broker, rules)
        records = forge.sample_candidates(endpoint(), count=2)
        assert len(records) == 1
        counts = ledger.counts("coder-sample")
        assert counts["dropped"] == 1 and counts["retained"] == 1


class TestBoostGate:
    def test_boundaries_exact(self):
        keep = RpeScore(0.45, 3, 8)
        assert passes_boost_gate(keep, 0.65, 0.4, 0.65)
        assert not passes_boost_gate(keep, 0.66, 0.4, 0.65)
        assert passes_boost_gate(RpeScore(0.40, 3, 8), 0.0, 0.4, 0.65)
        assert not passes_boost_gate(RpeScore(0.39, 3, 8), 0.0, 0.4, 0.65)
        assert passes_hard_gate(RpeScore(math.inf, 0, 8), 0.4)

    def test_integration_similarity_and_rpe(self, tmp_path, broker):
        # Candidate A renders but every reconstruction fails -> sentinel
        # score (passes); candidate B reconstructs 3 orthonormal ways ->
        # score ln2/3 (fails the 0.4 gate).
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": [fail_code()]}, "repeat": 1},
            {
                "match": {"substring": "accurately reproduces"},
                "respond": {"texts": [ok_code(0), ok_code(3), ok_code(6), fail_code(1)]},
            },
            # embeds: cand A render, then cand B render, then B's 3 reconstructions
            {"match": {"substring": ""}, "respond": {"vectors": [E4, E4, E1, E2, E3]}},
        ]
        forge, _, _, ledger = make_forge(tmp_path, broker, rules)
        index = HardSeedIndex([("h1", EmbeddingVector(tuple(E1), "m"))])
        cand_a = ChartRecord.for_code("#: png 30 30 1\n", "coder_sample", iteration=1)
        cand_b = ChartRecord.for_code("#: png 31 31 2\n", "coder_sample", iteration=1)
        kept = forge.boost_filter([cand_a, cand_b], index, rollouts=4)
        assert [r.chart_id for r in kept] == [cand_a.chart_id]
        assert kept[0].rpe.is_sentinel
        assert kept[0].max_sim_to_hard == pytest.approx(0.0, abs=1e-12)
        causes = {e.record_id: e.cause for e in ledger.events() if e.action == "dropped"}
        assert causes[cand_b.chart_id] == "low_rpe"

    def test_identical_embedding_dropped_as_similar(self, tmp_path, broker):
        rules = [
            {"match": {"substring": "accurately reproduces"}, "respond": {"texts": [fail_code()]}},
            {"match": {"substring": ""}, "respond": {"vectors": [E1]}},
        ]
        forge, _, _, ledger = make_forge(tmp_path, broker, rules)
        index = HardSeedIndex([("h1", EmbeddingVector(tuple(E1), "m"))])
        cand = ChartRecord.for_code("#: png 33 33 9\n", "coder_sample")
        kept = forge.boost_filter([cand], index, rollouts=2)
        assert kept == []
        causes = {e.record_id: e.cause for e in ledger.events() if e.action == "dropped"}
        assert causes[cand.chart_id] == "too_similar"

    def test_render_failure_dropped(self, tmp_path, broker):
        forge, _, _, ledger = make_forge(tmp_path, broker, [])
        index = HardSeedIndex([("h1", EmbeddingVector(tuple(E1), "m"))])
        cand = ChartRecord.for_code("#: error no render\n", "coder_sample")
        assert forge.boost_filter([cand], index, rollouts=2) == []
        causes = {e.record_id: e.cause for e in ledger.events() if e.action == "dropped"}
        assert causes[cand.chart_id].startswith("execution:")

    def test_empty_index_rejected(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        with pytest.raises(InvalidInputError):
            forge.boost_filter([], HardSeedIndex(), rollouts=2)


class TestSynthDataset:
    def _scored(self, values):
        out = []
        for i, v in enumerate(values):
            rec = ChartRecord.for_code(f"code{i}", "coder_sample")
            rec.rpe = RpeScore(v, 3, 8)
            out.append(rec)
        return out

    def test_boundary_inclusive(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        manifest, kept = forge.synth_dataset(self._scored([0.39, 0.40, 0.41]), 0.4)
        assert manifest["record_count"] == 2 and manifest["dropped_count"] == 1

    def test_empty_input(self, tmp_path, broker):
        forge, _, _, _ = make_forge(tmp_path, broker, [])
        manifest, kept = forge.synth_dataset([], 0.4, out_dir=tmp_path)
        assert manifest["record_count"] == 0
        assert (tmp_path / "dsyn.jsonl").read_text() == ""

    def test_counts_conserved(self, tmp_path, broker):
        forge, _, _, ledger = make_forge(tmp_path, broker, [])
        records = self._scored([0.1, 0.5, 0.9, 0.2])
        manifest, _ = forge.synth_dataset(records, 0.4)
        assert manifest["record_count"] + manifest["dropped_count"] == manifest["input_count"] == 4
        check_conservation(ledger, "synth", [r.chart_id for r in records])


class TestHardSeedIndex:
    def test_max_cosine_and_round_trip(self, tmp_path):
        index = HardSeedIndex(
            [("a", EmbeddingVector((1.0, 0.0), "m")), ("b", EmbeddingVector((0.0, 1.0), "m"))]
        )
        assert index.max_cosine(EmbeddingVector((2.0, 0.0), "m")) == pytest.approx(1.0)
        path = tmp_path / "index.jsonl"
        index.save(path)
        again = HardSeedIndex.load(path)
        assert again.chart_ids == ["a", "b"]

    def test_duplicate_and_dim_mismatch(self):
        index = HardSeedIndex([("a", EmbeddingVector((1.0, 0.0), "m"))])
        with pytest.raises(InvalidInputError):
            index.add("a", EmbeddingVector((0.0, 1.0), "m"))
        with pytest.raises(InvalidInputError):
            index.add("c", EmbeddingVector((1.0, 0.0, 0.0), "m"))


def test_load_corpus_images(tmp_path):
    store = ImageStore(tmp_path / "store")
    img = tmp_path / "corpus_img.png"
    img.write_bytes(make_png(5, 5))
    records = load_corpus_images([img], store)
    assert len(records) == 1
    assert store.get(records[0].image_ref) == make_png(5, 5)
