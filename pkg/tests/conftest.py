"""Shared fixtures: a counting mock router usable across runner instances."""

from __future__ import annotations

from chartforge.mocking import MockBackend


class SimulatedInterrupt(RuntimeError):
    """Stands in for a process crash between two records of a stage."""


class CountingRouter:
    """Routes mock:// endpoints to backends that persist across runs.

    Sharing rule cursors between an interrupted run and its resume
    mimics a deterministic server; the per-backend request logs are the
    duplicate-call oracle.
    """

    def __init__(self):
        self.backends: dict[str, MockBackend] = {}
        self.interrupt_after_chats: int | None = None

    def backend(self, path: str) -> MockBackend:
        if path not in self.backends:
            self.backends[path] = MockBackend.from_file(path)
        return self.backends[path]

    def __call__(self, kind, payload, cfg):
        path = cfg.base_url[len("mock://") :]
        if kind == "chat" and self.interrupt_after_chats is not None:
            if self.interrupt_after_chats <= 0:
                raise SimulatedInterrupt("scripted interrupt")
            self.interrupt_after_chats -= 1
        return self.backend(path)(kind, payload, cfg)

    def chat_calls(self) -> int:
        return sum(b.calls_by_kind["chat"] for b in self.backends.values())

    def embed_calls(self) -> int:
        return sum(b.calls_by_kind["embed"] for b in self.backends.values())
