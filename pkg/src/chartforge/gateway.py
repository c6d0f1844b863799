"""Client layer for chat-completion and embedding endpoints.

One Gateway instance is shared across pipeline stages and threads.  It
speaks the de-facto chat-completions JSON protocol over HTTP POST, keeps
at most ``max_parallel`` requests in flight per endpoint, and retries
transient failures (429/5xx/timeouts) with exponential backoff.  URLs of
the form ``mock://path/to/script.json`` route to the in-process scripted
backend instead of the network, which is how tests and the offline demo
run the whole pipeline without a model server.
"""

from __future__ import annotations

import base64
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import AuthError, GatewayProtocolError, InvalidInputError, TransportError

logger = logging.getLogger(__name__)

# Sampling presets used by the pipeline stages (overridable per manifest):
# reconstruction rollouts sample hot, the chart coder samples hot with
# nucleus+top-k, and all QA/reasoning stages run cooler with a long budget.
ROLLOUT_SAMPLING = {"temperature": 1.0}
CODER_SAMPLING = {"temperature": 1.0, "top_p": 0.95, "top_k": 20}
REASONING_SAMPLING = {"temperature": 0.6, "top_p": 0.95, "top_k": 20, "max_tokens": 32768}


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 200
    max_backoff_ms: int = 5000

    def __post_init__(self):
        if self.max_attempts < 1:
            raise InvalidInputError("retry.max_attempts must be >= 1")

    def delay_ms(self, retry_index: int) -> int:
        """Backoff before the (retry_index+1)-th retry; doubles up to the cap."""
        return min(self.base_backoff_ms * (2**retry_index), self.max_backoff_ms)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    auth_token: str | None = None
    max_parallel: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_s: float = 120.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise InvalidInputError("endpoint.max_parallel must be >= 1")


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    def as_data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[TextPart | ImagePart, ...]

    @staticmethod
    def text(role: str, text: str) -> "Message":
        return Message(role, (TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0
    max_tokens: int = 4096
    n_samples: int = 1
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise InvalidInputError("chat request needs at least one message")
        for msg in self.messages:
            if msg.role not in ("system", "user", "assistant"):
                raise InvalidInputError(f"unknown message role {msg.role!r}")
            if msg.role != "user" and any(isinstance(p, ImagePart) for p in msg.parts):
                raise InvalidInputError("image parts are only allowed in user messages")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise InvalidInputError("top_p must be in (0, 1]")
        if self.top_k < 0 or self.n_samples < 1:
            raise InvalidInputError("top_k must be >= 0 and n_samples >= 1")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise InvalidInputError("embedding contains non-finite values")


@dataclass
class TransportResponse:
    status: int
    body: dict | list | None


# kind is "chat" or "embed"; the payload is the wire-protocol JSON body.
Transport = Callable[[str, dict, EndpointConfig], TransportResponse]


class HttpTransport:
    """POSTs wire payloads to ``{base_url}/chat/completions`` / ``{base_url}/embeddings``."""

    PATHS = {"chat": "/chat/completions", "embed": "/embeddings"}

    def __init__(self):
        import requests

        self._session = requests.Session()
        self._requests = requests

    def __call__(self, kind: str, payload: dict, cfg: EndpointConfig) -> TransportResponse:
        url = cfg.base_url.rstrip("/") + self.PATHS[kind]
        headers = {"Content-Type": "application/json"}
        if cfg.auth_token:
            headers["Authorization"] = f"Bearer {cfg.auth_token}"
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=cfg.timeout_s)
        except self._requests.Timeout as exc:
            raise _RetryableFailure(f"timeout after {cfg.timeout_s}s: {exc}") from exc
        except self._requests.ConnectionError as exc:
            raise _RetryableFailure(f"connection error: {exc}") from exc
        try:
            body = resp.json()
        except ValueError:
            body = None
        return TransportResponse(resp.status_code, body)


class _RetryableFailure(Exception):
    """Internal marker for transport-level failures worth retrying."""


class RoutingTransport:
    """Dispatches per endpoint URL: ``mock://`` scripts in-process, else HTTP."""

    def __init__(self):
        self._http: HttpTransport | None = None
        self._mocks: dict[str, Transport] = {}
        self._lock = threading.Lock()

    def __call__(self, kind: str, payload: dict, cfg: EndpointConfig) -> TransportResponse:
        if cfg.base_url.startswith("mock://"):
            path = cfg.base_url[len("mock://") :]
            with self._lock:
                backend = self._mocks.get(path)
                if backend is None:
                    from .mocking import MockBackend

                    backend = MockBackend.from_file(path)
                    self._mocks[path] = backend
            return backend(kind, payload, cfg)
        with self._lock:
            if self._http is None:
                self._http = HttpTransport()
        return self._http(kind, payload, cfg)


def build_chat_payload(cfg: EndpointConfig, req: ChatRequest) -> dict:
    messages = []
    for msg in req.messages:
        content = []
        for part in msg.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": part.as_data_url()}})
        messages.append({"role": msg.role, "content": content})
    payload = {
        "model": cfg.model_id,
        "messages": messages,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "top_k": req.top_k,
        "max_tokens": req.max_tokens,
        "n": req.n_samples,
    }
    if req.seed is not None:
        payload["seed"] = req.seed
    return payload


class Gateway:
    """Thread-safe client enforcing per-endpoint concurrency and retries."""

    def __init__(self, transport: Transport | None = None, sleep: Callable[[float], None] = time.sleep):
        self._transport = transport or RoutingTransport()
        self._sleep = sleep
        self._semaphores: dict[tuple[str, str], threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()

    def _semaphore(self, cfg: EndpointConfig) -> threading.BoundedSemaphore:
        key = (cfg.base_url, cfg.model_id)
        with self._lock:
            sem = self._semaphores.get(key)
            if sem is None:
                sem = threading.BoundedSemaphore(cfg.max_parallel)
                self._semaphores[key] = sem
            return sem

    def _call(self, cfg: EndpointConfig, kind: str, payload: dict) -> dict | list:
        sem = self._semaphore(cfg)
        last_status: int | None = None
        last_note = ""
        for attempt in range(cfg.retry.max_attempts):
            if attempt > 0:
                self._sleep(cfg.retry.delay_ms(attempt - 1) / 1000.0)
            try:
                with sem:
                    resp = self._transport(kind, payload, cfg)
            except _RetryableFailure as exc:
                last_status, last_note = None, str(exc)
                logger.debug("retryable transport failure on %s: %s", cfg.base_url, exc)
                continue
            if resp.status in (401, 403):
                raise AuthError(f"auth rejected by {cfg.base_url} ({resp.status})", status=resp.status)
            if resp.status == 429 or 500 <= resp.status < 600:
                last_status, last_note = resp.status, f"HTTP {resp.status}"
                logger.debug("retryable status %s from %s", resp.status, cfg.base_url)
                continue
            if resp.status != 200:
                raise TransportError(
                    f"non-retryable HTTP {resp.status} from {cfg.base_url}", status=resp.status
                )
            if resp.body is None:
                raise GatewayProtocolError(f"unparsable response body from {cfg.base_url}")
            return resp.body
        raise TransportError(
            f"retries exhausted ({cfg.retry.max_attempts} attempts) against {cfg.base_url}: {last_note}",
            status=last_status,
        )

    def chat(self, cfg: EndpointConfig, req: ChatRequest) -> list[str]:
        """Returns exactly ``req.n_samples`` completion texts."""
        body = self._call(cfg, "chat", build_chat_payload(cfg, req))
        try:
            texts = [choice["message"]["content"] for choice in body["choices"]]
        except (KeyError, TypeError) as exc:
            raise GatewayProtocolError(f"malformed chat response from {cfg.base_url}: {exc}") from exc
        if len(texts) != req.n_samples or not all(isinstance(t, str) for t in texts):
            raise GatewayProtocolError(
                f"expected {req.n_samples} completions from {cfg.base_url}, got {len(texts)}"
            )
        return texts

    def embed(
        self,
        cfg: EndpointConfig,
        inputs: Sequence[str | bytes],
        batch_size: int = 32,
        media_type: str = "image/png",
    ) -> list[EmbeddingVector]:
        """One vector per input, order preserved; batching is internal."""
        if not inputs:
            raise InvalidInputError("embed: empty input list")
        out: list[EmbeddingVector] = []
        for start in range(0, len(inputs), batch_size):
            batch = inputs[start : start + batch_size]
            wire = [
                item if isinstance(item, str) else ImagePart(item, media_type).as_data_url()
                for item in batch
            ]
            body = self._call(cfg, "embed", {"model": cfg.model_id, "input": wire})
            try:
                vectors = [entry["embedding"] for entry in body["data"]]
            except (KeyError, TypeError) as exc:
                raise GatewayProtocolError(f"malformed embed response from {cfg.base_url}: {exc}") from exc
            if len(vectors) != len(batch):
                raise GatewayProtocolError(
                    f"embed batch size mismatch from {cfg.base_url}: sent {len(batch)}, got {len(vectors)}"
                )
            out.extend(EmbeddingVector(tuple(float(v) for v in vec), cfg.model_id) for vec in vectors)
        return out
