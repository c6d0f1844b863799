"""Deterministic scripted backend for the gateway.

A mock script is a JSON list of rules; the first non-exhausted rule
whose match clause applies answers the request.  Rules match on a
substring of the request text (all text parts for chat, all inputs for
embed) or on the per-kind request index, and respond with completion
texts, embedding vectors, or an injected HTTP status.  Text and vector
pools are consumed cyclically, so a single rule can serve a whole
sampling campaign.  Every request is logged for test inspection.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidInputError, MockScriptGapError
from .gateway import EndpointConfig, TransportResponse


@dataclass
class MockRule:
    substring: str | list[str] | None = None  # one or several fragments, all required
    index: int | None = None
    texts: list[str] | None = None
    vectors: list[list[float]] | None = None
    http_status: int | None = None
    repeat: int | None = None  # firings allowed; None = unlimited
    fired: int = 0
    cursor: int = 0

    @staticmethod
    def from_json(obj: dict) -> "MockRule":
        match = obj.get("match", {})
        respond = obj.get("respond", {})
        rule = MockRule(
            substring=match.get("substring"),
            index=match.get("index"),
            texts=respond.get("texts"),
            vectors=respond.get("vectors"),
            http_status=respond.get("http_status"),
            repeat=obj.get("repeat"),
        )
        if rule.texts is None and rule.vectors is None and rule.http_status is None:
            raise InvalidInputError("mock rule needs texts, vectors or http_status to respond with")
        return rule

    def exhausted(self) -> bool:
        return self.repeat is not None and self.fired >= self.repeat

    def matches(self, kind: str, text: str, request_index: int) -> bool:
        if self.exhausted():
            return False
        if self.index is not None and self.index != request_index:
            return False
        if self.substring is not None:
            needles = [self.substring] if isinstance(self.substring, str) else self.substring
            if not all(needle in text for needle in needles):
                return False
        if self.http_status is None:
            # Typed responses only serve their own request kind.
            if kind == "chat" and self.texts is None:
                return False
            if kind == "embed" and self.vectors is None:
                return False
        return True

    def take(self, pool: list, count: int) -> list:
        out = [pool[(self.cursor + i) % len(pool)] for i in range(count)]
        self.cursor += count
        return out


@dataclass
class RequestRecord:
    kind: str
    payload: dict
    index: int

    @property
    def text(self) -> str:
        return _searchable_text(self.kind, self.payload)

    @property
    def has_image(self) -> bool:
        if self.kind == "embed":
            return any(str(i).startswith("data:image") for i in self.payload.get("input", []))
        for msg in self.payload.get("messages", []):
            for part in msg.get("content", []):
                if part.get("type") == "image_url":
                    return True
        return False


def _searchable_text(kind: str, payload: dict) -> str:
    if kind == "embed":
        return "\n".join(str(item) for item in payload.get("input", []))
    chunks = []
    for msg in payload.get("messages", []):
        for part in msg.get("content", []):
            if part.get("type") == "text":
                chunks.append(part.get("text", ""))
            elif part.get("type") == "image_url":
                chunks.append(part.get("image_url", {}).get("url", ""))
    return "\n".join(chunks)


class MockBackend:
    """In-process Transport serving the chat/embed wire protocol from a script."""

    def __init__(self, rules: list[MockRule], strict: bool = True, latency_s: float = 0.0):
        self._rules = rules
        self._strict = strict
        self._latency_s = latency_s
        self._lock = threading.Lock()
        self.requests: list[RequestRecord] = []
        self.calls_by_kind = {"chat": 0, "embed": 0}
        self.in_flight = 0
        self.max_in_flight = 0

    @staticmethod
    def from_file(path: str | Path, strict: bool = True) -> "MockBackend":
        rules = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(rules, list):
            raise InvalidInputError(f"mock script {path} must be a JSON list of rules")
        return MockBackend([MockRule.from_json(r) for r in rules], strict=strict)

    def __call__(self, kind: str, payload: dict, cfg: EndpointConfig) -> TransportResponse:
        with self._lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self._latency_s:
                time.sleep(self._latency_s)
            with self._lock:
                return self._respond(kind, payload)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _respond(self, kind: str, payload: dict) -> TransportResponse:
        request_index = self.calls_by_kind[kind]
        self.calls_by_kind[kind] += 1
        self.requests.append(RequestRecord(kind, payload, request_index))
        text = _searchable_text(kind, payload)
        for rule in self._rules:
            if not rule.matches(kind, text, request_index):
                continue
            rule.fired += 1
            if rule.http_status is not None:
                return TransportResponse(rule.http_status, {"error": f"scripted {rule.http_status}"})
            if kind == "chat":
                count = int(payload.get("n", 1))
                choices = [{"message": {"content": t}} for t in rule.take(rule.texts, count)]
                return TransportResponse(200, {"choices": choices})
            count = len(payload.get("input", []))
            vectors = rule.take(rule.vectors, count)
            return TransportResponse(200, {"data": [{"embedding": list(v)} for v in vectors]})
        if self._strict:
            raise MockScriptGapError(f"no mock rule matches {kind} request #{request_index}: {text[:200]!r}")
        if kind == "chat":
            count = int(payload.get("n", 1))
            return TransportResponse(200, {"choices": [{"message": {"content": ""}}] * count})
        count = len(payload.get("input", []))
        return TransportResponse(200, {"data": [{"embedding": [0.0]} for _ in range(count)]})

    # -- test inspection helpers -------------------------------------------

    def chat_requests(self) -> list[RequestRecord]:
        return [r for r in self.requests if r.kind == "chat"]

    def embed_requests(self) -> list[RequestRecord]:
        return [r for r in self.requests if r.kind == "embed"]


def mock_backend(script: list[dict] | str | Path, strict: bool = True) -> MockBackend:
    """Build an in-process endpoint from rule dicts or a script file path."""
    if isinstance(script, (str, Path)):
        return MockBackend.from_file(script, strict=strict)
    return MockBackend([MockRule.from_json(r) for r in script], strict=strict)
