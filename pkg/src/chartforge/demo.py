"""Offline demo fixture: a 20-chart corpus plus scripted mock endpoints.

``build_fixture`` writes everything a fully offline end-to-end run
needs: the input images, one mock script per endpoint, and a manifest
wired to the stub worker.  Responses are keyed on request content
(image bytes, chart code) wherever possible so an interrupted run
resumes onto identical answers.  The same fixture backs the acceptance
suite and the README quick start:

    python3 -m chartforge.demo DIR
    chartforge run DIR/manifest.json
"""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

from .stub_worker import make_png

CORPUS_SIZE = 20
HARD_COUNT = 6  # images whose reconstructions all fail -> sentinel score
SINGLE_VALID = (6, 7)  # images with exactly one successful reconstruction

GROUND_TRUTH = "7.5"
QUESTION_TEXT = "<question>What is the combined efficiency ratio across panels?</question>"

# Distinctive fragments of the packaged stage prompts, used as mock match keys.
KEY_ROLLOUT = "accurately reproduces"
KEY_SCRIPT = "Algorithmic Synthesis"
KEY_QUESTION = "Reverse-Engineering"
KEY_CONSISTENCY = "Chart Code Comprehension"
KEY_DISTILL = "high-quality example to train"

# Expected terminal shape of a demo run (pinned by the acceptance suite).
EXPECTED = {
    "hard": HARD_COUNT,
    "cold": 5,
    "boost_iter0": 2,
    "boost_iter1": 3,
    "dsyn": 5,
    "qa_consistent": 7,
    "rl": 2,
    "sft": 3,
}

E = [[1.0 if i == j else 0.0 for j in range(8)] for i in range(8)]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def corpus_png(i: int) -> bytes:
    return make_png(24 + i, 20, seed=1000 + i)


def fenced(body: str) -> str:
    return f"```python\n{body}\n```"


ROLL_FAIL = fenced("#: error reconstruction failed")


def easy_code(i: int) -> str:
    return fenced(f"#: png 40 30 {2000 + i}")


def cold_body(j: int) -> str:
    return f"#: png 50 35 {3000 + j}"


def cand_body(m: int) -> str:
    return f"#: png 60 40 {4000 + m}"


def synth_body(m: int) -> str:
    return f"#: png 60 40 {4500 + m}"


def _trace(matches: bool, words: int = 110) -> str:
    think = " ".join(f"obs{i}" for i in range(words))
    answer = GROUND_TRUTH if matches else "9.9"
    return f"<think>{think}</think>\nTherefore, the final answer is <answer>{answer}</answer>."


def _short_trace(matches: bool) -> str:
    return _trace(matches, words=20)


def _rollout_rules() -> list[dict]:
    rules = []
    for i in range(CORPUS_SIZE):
        if i < HARD_COUNT:
            codes = [ROLL_FAIL] * 8
        elif i in SINGLE_VALID:
            codes = [easy_code(i)] + [ROLL_FAIL] * 7
        else:
            codes = [easy_code(i)] * 8
        rules.append({"match": {"substring": _b64(corpus_png(i))}, "respond": {"texts": codes}})
    # Candidate sub-campaigns: every reconstruction fails -> sentinel score.
    rules.append({"match": {"substring": KEY_ROLLOUT}, "respond": {"texts": [ROLL_FAIL]}})
    return rules


def _embed_rules() -> list[dict]:
    rules = []
    for i in range(HARD_COUNT):
        rules.append({"match": {"substring": _b64(corpus_png(i))}, "respond": {"vectors": [E[i]]}})
    candidate_vectors = {
        cand_body(0): E[6],                        # kept (orthogonal to the hard set)
        cand_body(1): E[7],                        # kept
        cand_body(4): E[1],                        # identical to a hard seed -> dropped
        cand_body(6): [0, 0, 0, 0, 0, 0, 1, 1],    # iteration 1, kept
        cand_body(7): [0, 0, 0, 0, 0, 0, 2, 1],    # kept
        cand_body(8): [0, 0, 0, 0, 0, 0, 1, 2],    # kept
        cand_body(9): E[0],                        # similar -> dropped
    }
    for body, vector in candidate_vectors.items():
        width, height, seed = 60, 40, int(body.split()[-1])
        rules.append(
            {
                "match": {"substring": _b64(make_png(width, height, seed))},
                "respond": {"vectors": [vector]},
            }
        )
    rules.append({"match": {"substring": ""}, "respond": {"vectors": [[1.0] * 8]}})
    return rules


def _codegen_rules() -> list[dict]:
    # Hard image 5 yields a program that fails to execute; the rest succeed.
    rules = []
    for j in range(HARD_COUNT):
        body = "#: error cold start failed" if j == 5 else cold_body(j)
        rules.append(
            {"match": {"substring": _b64(corpus_png(j))}, "respond": {"texts": [fenced(body)]}}
        )
    return rules


def _coder_rules() -> list[dict]:
    no_fence = "I would rather describe the chart in prose."
    iter0 = [
        fenced(cand_body(0)),
        fenced(cand_body(1)),
        fenced("#: error broken program"),  # drops at boost (execution)
        fenced(cand_body(0)),              # duplicate of the first sample
        fenced(cand_body(4)),              # drops at boost (too similar)
        no_fence,
    ]
    iter1 = [
        fenced(cand_body(6)),
        fenced(cand_body(7)),
        fenced(cand_body(8)),
        fenced(cand_body(9)),              # drops at boost (too similar)
        fenced("#: error broken program two"),
        no_fence,
    ]
    synth = [fenced(synth_body(m)) for m in range(5)] + [no_fence]
    return [{"match": {"substring": ""}, "respond": {"texts": iter0 + iter1 + synth}}]


def _qa_rules() -> list[dict]:
    ok_script = f"Blueprint first.\n<answer>#: print {GROUND_TRUTH}</answer>"
    err_script = "Blueprint first.\n<answer>#: error no data available</answer>"
    untagged = "Here is a script without the required wrapper."
    answer_ok = f"Therefore, the final answer is <answer>{GROUND_TRUTH}</answer>."
    answer_bad = "Therefore, the final answer is <answer>8.0</answer>."
    # Per chart: step-1 pool is consumed in script-slot order; step-3 pool in
    # the order surviving slots reach the consistency check.
    step1 = {0: [ok_script, untagged], 1: [err_script, ok_script]}
    step3 = {2: [answer_bad, answer_ok]}
    rules = []
    for m in range(5):
        code = synth_body(m)
        rules.append(
            {
                "match": {"substring": [KEY_SCRIPT, code]},
                "respond": {"texts": step1.get(m, [ok_script])},
            }
        )
        rules.append(
            {
                "match": {"substring": [KEY_QUESTION, code]},
                "respond": {"texts": [f"Logic reading.\n{QUESTION_TEXT}"]},
            }
        )
        rules.append(
            {
                "match": {"substring": [KEY_CONSISTENCY, code]},
                "respond": {"texts": step3.get(m, [answer_ok])},
            }
        )
    return rules


def _distill_rules() -> list[dict]:
    # Keyed on the chart image each distillation request attaches; pools are
    # consumed three traces per surviving candidate, in candidate order.
    pools = {
        0: [_short_trace(True), _trace(True), _trace(False)],   # r=1/3, sft
        1: [_trace(True), _trace(False), _trace(False)],        # r=2/3
        2: [_trace(True), _trace(True), _trace(True)],          # r=0, rejected
        3: [_trace(False)] * 3 + [_trace(True), _trace(False), _trace(False)],  # r=1; r=2/3
        4: [_trace(False), _trace(True), _trace(False), _trace(True), _trace(True), _trace(False)],
    }
    rules = []
    for m, pool in pools.items():
        image = make_png(60, 40, 4500 + m)
        rules.append(
            {
                "match": {"substring": [KEY_DISTILL, _b64(image)]},
                "respond": {"texts": pool},
            }
        )
    return rules


def _manifest(root: Path, out_name: str, store_name: str) -> dict:
    def mock(name: str) -> dict:
        return {"base_url": f"mock://mocks/{name}.json", "model_id": f"demo-{name}", "max_parallel": 1}

    return {
        "seed": 20240817,
        "store_root": store_name,
        "output_root": out_name,
        "worker_cmd": [sys.executable, "-m", "chartforge.stub_worker"],
        "worker_pool_size": 2,
        "canonical_ledger": True,
        "max_parallel_records": 1,
        "render_timeout_s": 20.0,
        "endpoints": {
            "rollout": mock("rollout"),
            "embed": mock("embed"),
            "codegen": mock("codegen"),
            "coder": mock("coder"),
            "qa": mock("qa"),
            "distill": mock("distill"),
        },
        "inputs": {"corpus_images": "images"},
        "stages": [
            {"name": "score", "rollouts": 8},
            {"name": "filter-hard", "rpe_threshold": 0.4},
            {"name": "cold-start", "endpoint": "codegen"},
            {"name": "export-coder-set"},
            {
                "name": "self-enhance",
                "iterations": 2,
                "count": 6,
                "endpoint": "coder",
                "rpe_threshold": 0.4,
                "sim_limit": 0.65,
                "rollouts": 8,
            },
            {"name": "synth", "count": 6, "endpoint": "coder", "rollouts": 8, "rpe_threshold": 0.4},
            {"name": "qa-synth", "endpoint": "qa", "scripts_per_chart": 2},
            {"name": "cot-distill", "endpoint": "qa", "distill_endpoint": "distill", "traces": 3},
            {"name": "cot-filter"},
            {"name": "bucket", "rl_quota": 2},
            {"name": "diagnose", "sample_size": 1000},
        ],
    }


def build_fixture(root: str | Path, out_name: str = "out", store_name: str = "store") -> Path:
    """Write images, mock scripts and manifest under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "mocks").mkdir(parents=True, exist_ok=True)
    for i in range(CORPUS_SIZE):
        (root / "images" / f"chart_{i:02d}.png").write_bytes(corpus_png(i))
    scripts = {
        "rollout": _rollout_rules(),
        "embed": _embed_rules(),
        "codegen": _codegen_rules(),
        "coder": _coder_rules(),
        "qa": _qa_rules(),
        "distill": _distill_rules(),
    }
    for name, rules in scripts.items():
        (root / "mocks" / f"{name}.json").write_text(
            json.dumps(rules, ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
        )
    manifest_path = root / "manifest.json"
    manifest_path.write_text(
        json.dumps(_manifest(root, out_name, store_name), ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest_path


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python3 -m chartforge.demo FIXTURE_DIR", file=sys.stderr)
        raise SystemExit(2)
    path = build_fixture(sys.argv[1])
    print(f"fixture ready: {path}")
    print(f"run it with: chartforge run {path}")
