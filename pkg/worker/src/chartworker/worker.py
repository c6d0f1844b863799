"""Sandbox runtime executing chart programs and answer scripts.

Speaks the broker's newline-delimited JSON protocol on stdin/stdout, one
task at a time:

    request  {"task_id": str, "kind": "render"|"script", "code": str, "timeout_s": num}
    response {"task_id": str, "status": str, "stdout": str, "stderr": str,
              "artifact_b64": str?, "wall_ms": num}

Each task runs in a fresh temporary directory with a fresh globals dict.
Render tasks must leave an ``image.png`` behind; script tasks have their
stdout captured (truncated at 64 KiB).  Limits are best-effort and
OS-dependent: a wall-clock alarm per task, a per-task CPU-time cap
derived from the task timeout, an address-space cap applied at startup,
and a disabled socket layer.  The protocol stream itself is shielded
from user code: the real stdout is duplicated away before any task
runs, and fd 1 is pointed at stderr.
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import logging
import os
import resource
import shutil
import signal
import socket
import sys
import tempfile
import time
import traceback
from dataclasses import dataclass

logger = logging.getLogger(__name__)

STDOUT_CAP = 64 * 1024
TRACEBACK_TAIL = 8 * 1024
CPU_SLACK_S = 5


@dataclass
class WorkerConfig:
    cpu_limit_s: float | None = None  # extra per-task CPU allowance beyond timeout
    mem_limit_bytes: int | None = 2 * 1024**3
    deny_network: bool = True


class TaskInterrupted(Exception):
    """Wall-clock or CPU budget exhausted for the current task."""


def _alarm_handler(signum, frame):
    raise TaskInterrupted("wall-clock timeout")


def _xcpu_handler(signum, frame):
    raise TaskInterrupted("cpu-time limit")


class _DeniedSocket(socket.socket):
    def __init__(self, *args, **kwargs):
        raise OSError("network access is disabled inside the worker")


def harden(config: WorkerConfig) -> None:
    """Startup hardening: headless plotting, no sockets, memory cap."""
    os.environ.setdefault("MPLBACKEND", "Agg")
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    # Generated programs occasionally call plt.show() despite the prompt
    # contract; displaying is meaningless here, so neutralize instead of
    # failing the task.
    plt.show = lambda *args, **kwargs: None

    if config.deny_network:
        socket.socket = _DeniedSocket  # type: ignore[misc]
        socket.create_connection = _DeniedSocket  # type: ignore[assignment]

    if config.mem_limit_bytes:
        try:
            resource.setrlimit(resource.RLIMIT_AS, (config.mem_limit_bytes, resource.RLIM_INFINITY))
        except (ValueError, OSError) as exc:
            logger.warning("could not set memory limit: %s", exc)

    signal.signal(signal.SIGALRM, _alarm_handler)
    signal.signal(signal.SIGXCPU, _xcpu_handler)


def _set_task_cpu_limit(timeout_s: float, config: WorkerConfig) -> None:
    """Cap cumulative CPU so a spinning task dies even if the alarm is evaded."""
    usage = resource.getrusage(resource.RUSAGE_SELF)
    allowance = config.cpu_limit_s if config.cpu_limit_s is not None else timeout_s + CPU_SLACK_S
    budget = int(usage.ru_utime + usage.ru_stime + allowance) + 1
    try:
        resource.setrlimit(resource.RLIMIT_CPU, (budget, resource.RLIM_INFINITY))
    except (ValueError, OSError) as exc:
        logger.warning("could not set cpu limit: %s", exc)


def _truncate(text: str, cap: int) -> str:
    return text if len(text) <= cap else text[-cap:]


def execute_task(task_id: str, kind: str, code: str, timeout_s: float, config: WorkerConfig) -> dict:
    """Run one task in a fresh temp dir and build its protocol response."""
    started = time.monotonic()
    workdir = tempfile.mkdtemp(prefix="chartwork-")
    previous_cwd = os.getcwd()
    capture = io.StringIO()
    saved_stdout = sys.stdout
    status, stderr_text = "ok", ""
    try:
        os.chdir(workdir)
        _set_task_cpu_limit(timeout_s, config)
        sys.stdout = capture
        signal.setitimer(signal.ITIMER_REAL, max(0.01, timeout_s))
        try:
            task_globals = {"__name__": "__main__", "__builtins__": __builtins__}
            exec(compile(code, "<task>", "exec"), task_globals)
        except TaskInterrupted as exc:
            status, stderr_text = "timeout", str(exc)
        except SystemExit as exc:
            if exc.code not in (None, 0):
                status, stderr_text = "exec_error", f"SystemExit: {exc.code}"
        except MemoryError:
            status, stderr_text = "exec_error", "MemoryError: address-space limit reached"
        except BaseException:
            status = "exec_error"
            stderr_text = _truncate(traceback.format_exc(), TRACEBACK_TAIL)
        finally:
            signal.setitimer(signal.ITIMER_REAL, 0)
            sys.stdout = saved_stdout

        response = {
            "task_id": task_id,
            "status": status,
            "stdout": _truncate(capture.getvalue(), STDOUT_CAP),
            "stderr": stderr_text,
        }
        if kind == "render" and status == "ok":
            image_path = os.path.join(workdir, "image.png")
            if os.path.exists(image_path):
                with open(image_path, "rb") as fh:
                    response["artifact_b64"] = base64.b64encode(fh.read()).decode("ascii")
            else:
                response["status"] = "exec_error"
                response["stderr"] += "\nrender produced no image.png"
        response["wall_ms"] = (time.monotonic() - started) * 1000.0
        return response
    finally:
        sys.stdout = saved_stdout
        try:
            import matplotlib.pyplot as plt

            plt.close("all")
        except Exception:
            pass
        os.chdir(previous_cwd)
        shutil.rmtree(workdir, ignore_errors=True)


def serve_loop(stdin, protocol_out, config: WorkerConfig) -> None:
    """Answer every request line with exactly one response line until EOF."""
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            task_id = request["task_id"]
            kind = request.get("kind", "script")
            code = request.get("code", "")
            timeout_s = float(request.get("timeout_s", 60.0))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            reply = {
                "task_id": "",
                "status": "exec_error",
                "stdout": "",
                "stderr": f"protocol parse failure: {exc}",
                "wall_ms": 0.0,
            }
            protocol_out.write(json.dumps(reply) + "\n")
            protocol_out.flush()
            continue
        reply = execute_task(task_id, kind, code, timeout_s, config)
        protocol_out.write(json.dumps(reply) + "\n")
        protocol_out.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chartworker", description=__doc__.splitlines()[0])
    parser.add_argument("--cpu-limit-s", type=float, default=None,
                        help="per-task CPU allowance (default: task timeout + 5s)")
    parser.add_argument("--mem-limit-bytes", type=int, default=2 * 1024**3)
    parser.add_argument("--allow-network", action="store_true")
    args = parser.parse_args(argv)
    config = WorkerConfig(
        cpu_limit_s=args.cpu_limit_s,
        mem_limit_bytes=args.mem_limit_bytes or None,
        deny_network=not args.allow_network,
    )
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)

    # Claim the protocol stream before any user code can touch fd 1:
    # responses go through the duplicate; stray fd-1 writes land on stderr.
    protocol_out = os.fdopen(os.dup(sys.stdout.fileno()), "w", encoding="utf-8")
    os.dup2(sys.stderr.fileno(), sys.stdout.fileno())

    harden(config)
    serve_loop(sys.stdin, protocol_out, config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
