"""Sandbox execution broker.

Owns a fixed-size pool of worker subprocesses that render chart programs
and execute answer scripts.  The wire protocol is newline-delimited JSON
over each worker's stdin/stdout with one task in flight per worker:

    request  {"task_id": str, "kind": "render"|"script", "code": str, "timeout_s": num}
    response {"task_id": str, "status": str, "stdout": str, "stderr": str,
              "artifact_b64": str?, "wall_ms": num}

The broker enforces a wall-clock backstop on top of whatever limits the
worker applies itself: a worker that does not answer within
``timeout_s + kill_grace_s`` is killed and replaced, and the task
resolves with status ``timeout``.  A worker that dies mid-task resolves
the task as ``worker_crash``.  ``submit`` blocks the calling thread and
is safe to call from many threads at once.
"""

from __future__ import annotations

import base64
import json
import logging
import queue
import subprocess
import threading
import time
from dataclasses import dataclass

from .errors import (
    BrokerUnavailableError,
    ExecutionFailedError,
    InvalidInputError,
    WorkerProtocolError,
)

logger = logging.getLogger(__name__)

MAX_CODE_BYTES = 1024 * 1024
TAIL_BYTES = 8 * 1024
DEFAULT_TIMEOUT_S = 60.0


@dataclass(frozen=True)
class ExecutionTask:
    task_id: str
    kind: str  # "render" or "script"
    code: str
    timeout_s: float = DEFAULT_TIMEOUT_S
    workdir_policy: str = "fresh-temp-dir"

    def __post_init__(self):
        if self.kind not in ("render", "script"):
            raise InvalidInputError(f"unknown task kind {self.kind!r}")
        if not self.code:
            raise InvalidInputError("task code must be nonempty")
        if self.timeout_s <= 0:
            raise InvalidInputError("task timeout_s must be > 0")


@dataclass
class ExecutionResult:
    task_id: str
    status: str  # ok | exec_error | timeout | worker_crash
    stdout_tail: str
    stderr_tail: str
    artifact: bytes | None
    final_print: str | None
    wall_ms: float


def _tail(text: str) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= TAIL_BYTES:
        return text
    return raw[-TAIL_BYTES:].decode("utf-8", errors="replace")


def _final_print(stdout: str) -> str | None:
    for line in reversed(stdout.splitlines()):
        if line.strip():
            return line.strip()
    return None


class _WorkerHandle:
    def __init__(self, cmd: list[str]):
        self.proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )

    def alive(self) -> bool:
        return self.proc.poll() is None

    def send(self, line: str) -> None:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def read_response(self, deadline: float) -> str | None:
        """One response line; "" when the worker died (EOF), None on deadline."""
        box: list[str] = []
        reader = threading.Thread(target=lambda: box.append(self.proc.stdout.readline()), daemon=True)
        reader.start()
        reader.join(max(0.0, deadline - time.monotonic()))
        if reader.is_alive():
            return None
        return box[0] if box else ""

    def kill(self) -> None:
        try:
            self.proc.kill()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


class ExecutionBroker:
    """Fixed pool of protocol workers behind a blocking ``submit``."""

    def __init__(self, worker_cmd: list[str], pool_size: int = 4, kill_grace_s: float = 1.0):
        if pool_size < 1:
            raise InvalidInputError("pool_size must be >= 1")
        self._worker_cmd = list(worker_cmd)
        self._pool_size = pool_size
        self._kill_grace_s = kill_grace_s
        self._idle: queue.Queue[_WorkerHandle] = queue.Queue()
        self._shutdown = False
        self._lock = threading.Lock()
        for _ in range(pool_size):
            self._idle.put(_WorkerHandle(self._worker_cmd))

    def __enter__(self) -> "ExecutionBroker":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def submit(self, task: ExecutionTask) -> ExecutionResult:
        if self._shutdown:
            raise BrokerUnavailableError("broker is shut down")
        if len(task.code.encode("utf-8")) > MAX_CODE_BYTES:
            raise InvalidInputError(f"task code exceeds {MAX_CODE_BYTES} bytes")
        handle = self._idle.get()
        replace = False
        try:
            if not handle.alive():
                handle.kill()
                handle = _WorkerHandle(self._worker_cmd)
            started = time.monotonic()
            request = json.dumps(
                {"task_id": task.task_id, "kind": task.kind, "code": task.code, "timeout_s": task.timeout_s}
            )
            try:
                handle.send(request)
            except (BrokenPipeError, OSError):
                replace = True
                return self._crash_result(task, started)
            deadline = started + task.timeout_s + self._kill_grace_s
            line = handle.read_response(deadline)
            wall_ms = (time.monotonic() - started) * 1000.0
            if line is None:
                replace = True
                handle.kill()
                return ExecutionResult(task.task_id, "timeout", "", "", None, None, wall_ms)
            if line == "" or not line.strip():
                replace = True
                handle.kill()
                return self._crash_result(task, started)
            try:
                payload = json.loads(line)
            except json.JSONDecodeError:
                replace = True
                handle.kill()
                return self._crash_result(task, started)
            if payload.get("task_id") != task.task_id:
                replace = True
                handle.kill()
                return self._crash_result(task, started)
            return self._build_result(task, payload, wall_ms)
        finally:
            if self._shutdown:
                handle.kill()
            else:
                self._idle.put(_WorkerHandle(self._worker_cmd) if replace else handle)

    def _crash_result(self, task: ExecutionTask, started: float) -> ExecutionResult:
        wall_ms = (time.monotonic() - started) * 1000.0
        return ExecutionResult(task.task_id, "worker_crash", "", "", None, None, wall_ms)

    def _build_result(self, task: ExecutionTask, payload: dict, broker_wall_ms: float) -> ExecutionResult:
        status = payload.get("status", "exec_error")
        stdout = payload.get("stdout", "") or ""
        stderr = payload.get("stderr", "") or ""
        artifact = None
        if payload.get("artifact_b64"):
            try:
                artifact = base64.b64decode(payload["artifact_b64"])
            except (ValueError, TypeError):
                status = "exec_error"
                stderr += "\n[broker] artifact_b64 failed to decode"
        wall_ms = float(payload.get("wall_ms", broker_wall_ms))
        return ExecutionResult(
            task_id=task.task_id,
            status=status,
            stdout_tail=_tail(stdout),
            stderr_tail=_tail(stderr),
            artifact=artifact,
            final_print=_final_print(stdout) if task.kind == "script" else None,
            wall_ms=wall_ms,
        )

    def render_chart(self, code: str, timeout_s: float = DEFAULT_TIMEOUT_S, task_id: str = "render") -> bytes:
        """Submit a render task; returns PNG bytes or raises ExecutionFailedError."""
        result = self.submit(ExecutionTask(task_id, "render", code, timeout_s))
        if result.status != "ok":
            raise ExecutionFailedError(
                f"render failed with status {result.status}", result.status, result.stderr_tail
            )
        if not result.artifact:
            raise WorkerProtocolError("render task returned ok without an artifact")
        return result.artifact

    def run_script(self, code: str, timeout_s: float = DEFAULT_TIMEOUT_S, task_id: str = "script") -> str:
        """Submit a script task; returns the trimmed final stdout line."""
        result = self.submit(ExecutionTask(task_id, "script", code, timeout_s))
        if result.status != "ok":
            raise ExecutionFailedError(
                f"script failed with status {result.status}", result.status, result.stderr_tail
            )
        if result.final_print is None:
            raise WorkerProtocolError("script task printed nothing (one print statement is required)")
        return result.final_print

    def shutdown(self) -> None:
        with self._lock:
            if self._shutdown:
                return
            self._shutdown = True
        while True:
            try:
                handle = self._idle.get_nowait()
            except queue.Empty:
                break
            try:
                if handle.proc.stdin:
                    handle.proc.stdin.close()
            except OSError:
                pass
            handle.kill()
