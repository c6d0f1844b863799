"""Run manifest: a single strict JSON document describing a pipeline run.

Every tunable the pipeline consumes lives here with its published
default (complexity threshold 0.4, similarity limit 0.65, 8
reconstruction rollouts, 3 reasoning traces, 2 scripts per chart, 2
self-enhancement iterations), so no stage hardcodes a number.  Secrets
never appear in the file: endpoint auth is an environment-variable
name.  See docs/manifest.md for the schema.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError
from .gateway import EndpointConfig, RetryPolicy

STAGE_NAMES = (
    "score",
    "filter-hard",
    "cold-start",
    "export-coder-set",
    "coder-sample",
    "self-enhance",
    "boost",
    "synth",
    "qa-synth",
    "cot-distill",
    "cot-filter",
    "bucket",
    "diagnose",
)

DEFAULTS = {
    "rpe_threshold": 0.4,
    "sim_limit": 0.65,
    "rollouts": 8,
    "traces": 3,
    "scripts_per_chart": 2,
    "iterations": 2,
    "rl_quota": 0,
    "min_words": 100,
    "ngram_n": 50,
    "min_repeats": 3,
    "sample_size": 1000,
}

_UNIT_INTERVAL_KEYS = ("rpe_threshold", "sim_limit")


@dataclass
class StageSpec:
    name: str
    params: dict = field(default_factory=dict)

    def get(self, key: str, fallback=None):
        if key in self.params:
            return self.params[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        return fallback


@dataclass
class PipelineManifest:
    seed: int
    store_root: Path
    output_root: Path
    worker_cmd: list[str]
    endpoints: dict[str, EndpointConfig]
    stages: list[StageSpec]
    inputs: dict = field(default_factory=dict)
    prompt_overrides: dict = field(default_factory=dict)
    worker_pool_size: int = 2
    canonical_ledger: bool = True
    max_parallel_records: int = 1
    zero_valid_policy: str = "sentinel"
    sigma_source: str = "gram_eigenvalues"
    render_timeout_s: float = 60.0

    def endpoint(self, name: str) -> EndpointConfig:
        try:
            return self.endpoints[name]
        except KeyError:
            raise ManifestError(f"endpoints.{name}: not defined") from None


def _parse_endpoint(name: str, obj: dict) -> EndpointConfig:
    try:
        base_url = obj["base_url"]
        model_id = obj["model_id"]
    except KeyError as exc:
        raise ManifestError(f"endpoints.{name}: missing field {exc}") from None
    retry_obj = obj.get("retry", {})
    retry = RetryPolicy(
        max_attempts=int(retry_obj.get("max_attempts", 3)),
        base_backoff_ms=int(retry_obj.get("base_backoff_ms", 200)),
        max_backoff_ms=int(retry_obj.get("max_backoff_ms", 5000)),
    )
    token = None
    token_env = obj.get("auth_token_env")
    if token_env:
        token = os.environ.get(token_env)
    return EndpointConfig(
        base_url=base_url,
        model_id=model_id,
        auth_token=token,
        max_parallel=int(obj.get("max_parallel", 4)),
        retry=retry,
        timeout_s=float(obj.get("timeout_s", 120.0)),
    )


def load_manifest(path: str | Path) -> PipelineManifest:
    """Parse and validate a manifest file; paths resolve relative to it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON (line {exc.lineno}, col {exc.colno}): {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ManifestError("manifest root must be a JSON object")

    for required in ("seed", "worker_cmd", "endpoints", "stages"):
        if required not in raw:
            raise ManifestError(f"{required}: required field is missing")
    if not isinstance(raw["seed"], int):
        raise ManifestError("seed: must be an integer (runs must be reproducible)")
    if not isinstance(raw["worker_cmd"], list) or not raw["worker_cmd"]:
        raise ManifestError("worker_cmd: must be a nonempty command list")

    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    endpoints = {}
    for name, obj in raw["endpoints"].items():
        cfg = _parse_endpoint(name, obj)
        if cfg.base_url.startswith("mock://"):
            cfg = EndpointConfig(
                base_url="mock://" + str(resolve(cfg.base_url[len("mock://") :])),
                model_id=cfg.model_id,
                auth_token=cfg.auth_token,
                max_parallel=cfg.max_parallel,
                retry=cfg.retry,
                timeout_s=cfg.timeout_s,
            )
        endpoints[name] = cfg

    stages: list[StageSpec] = []
    if not isinstance(raw["stages"], list):
        raise ManifestError("stages: must be an ordered list")
    for i, entry in enumerate(raw["stages"]):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ManifestError(f"stages[{i}]: each stage needs a name")
        name = entry["name"]
        if name not in STAGE_NAMES:
            raise ManifestError(f"stages[{i}].name: unknown stage {name!r}")
        params = {k: v for k, v in entry.items() if k != "name"}
        for key in _UNIT_INTERVAL_KEYS:
            if key in params and not (0 <= params[key] <= 1):
                raise ManifestError(f"stages[{i}].{key}: {params[key]} outside [0, 1]")
        endpoint_keys = [k for k in params if k == "endpoint" or k.endswith("_endpoint")]
        for key in endpoint_keys:
            value = params[key]
            names = value if isinstance(value, list) else [value]
            for ep in names:
                if ep not in endpoints:
                    raise ManifestError(f"stages[{i}].{key}: endpoint {ep!r} is not defined")
        stages.append(StageSpec(name, params))

    inputs = raw.get("inputs", {})
    if "corpus_images" in inputs and isinstance(inputs["corpus_images"], str):
        inputs = dict(inputs, corpus_images=str(resolve(inputs["corpus_images"])))

    prompt_overrides = {k: str(resolve(v)) for k, v in raw.get("prompt_overrides", {}).items()}

    return PipelineManifest(
        seed=raw["seed"],
        store_root=resolve(raw.get("store_root", "store")),
        output_root=resolve(raw.get("output_root", "out")),
        worker_cmd=[str(c) for c in raw["worker_cmd"]],
        endpoints=endpoints,
        stages=stages,
        inputs=inputs,
        prompt_overrides=prompt_overrides,
        worker_pool_size=int(raw.get("worker_pool_size", 2)),
        canonical_ledger=bool(raw.get("canonical_ledger", True)),
        max_parallel_records=int(raw.get("max_parallel_records", 1)),
        zero_valid_policy=raw.get("zero_valid_policy", "sentinel"),
        sigma_source=raw.get("sigma_source", "gram_eigenvalues"),
        render_timeout_s=float(raw.get("render_timeout_s", 60.0)),
    )
