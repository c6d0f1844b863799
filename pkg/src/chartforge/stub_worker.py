"""Deterministic stub worker for broker tests and offline runs.

Speaks exactly the broker's stdio protocol but interprets a tiny
directive language instead of executing code: lines starting with
``#:`` drive the stub, anything else is ignored.  Because ``#:`` is a
Python comment, a payload can carry both directives and equivalent real
Python, letting the same conformance suite run against this stub and
against the real rendering worker.

Directives:
    #: print <text>      append a stdout line
    #: stderr <text>     append a stderr line
    #: sleep <seconds>   stall (exercises the broker's kill path)
    #: error <message>   finish with status exec_error
    #: crash             exit the process without responding
    #: png <w> <h> [n]   write a deterministic image.png in the task dir
    #: sentinel <name>   isolation probe: write <name>.sentinel, then
                         report every *.sentinel visible in the task dir

Run with ``python -m chartforge.stub_worker``.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import struct
import sys
import tempfile
import time
import zlib


def make_png(width: int, height: int, seed: int = 0) -> bytes:
    """Tiny dependency-free RGB PNG with pixels derived from (w, h, seed)."""

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    rows = bytearray()
    for y in range(height):
        rows.append(0)  # filter: none
        for x in range(width):
            rows += bytes(((x * 7 + seed) % 256, (y * 13 + seed * 3) % 256, (x + y + seed) % 256))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(bytes(rows)))
        + chunk(b"IEND", b"")
    )


def _execute(code: str, kind: str) -> dict:
    stdout_lines: list[str] = []
    stderr_lines: list[str] = []
    status = "ok"
    for raw in code.splitlines():
        line = raw.strip()
        if not line.startswith("#:"):
            continue
        words = line[2:].strip().split(None, 1)
        if not words:
            continue
        op, arg = words[0], (words[1] if len(words) > 1 else "")
        if op == "print":
            stdout_lines.append(arg)
        elif op == "stderr":
            stderr_lines.append(arg)
        elif op == "sleep":
            time.sleep(float(arg))
        elif op == "error":
            stderr_lines.append(arg)
            status = "exec_error"
            break
        elif op == "crash":
            os._exit(13)
        elif op == "png":
            parts = arg.split()
            seed = int(parts[2]) if len(parts) > 2 else 0
            with open("image.png", "wb") as fh:
                fh.write(make_png(int(parts[0]), int(parts[1]), seed))
        elif op == "sentinel":
            with open(f"{arg}.sentinel", "w", encoding="utf-8") as fh:
                fh.write(arg)
            time.sleep(0.01)
            names = sorted(n for n in os.listdir(".") if n.endswith(".sentinel"))
            stdout_lines.append("SENTINELS " + ",".join(names))
    response = {
        "status": status,
        "stdout": "\n".join(stdout_lines) + ("\n" if stdout_lines else ""),
        "stderr": "\n".join(stderr_lines) + ("\n" if stderr_lines else ""),
    }
    if kind == "render" and status == "ok":
        if os.path.exists("image.png"):
            with open("image.png", "rb") as fh:
                response["artifact_b64"] = base64.b64encode(fh.read()).decode("ascii")
        else:
            response["status"] = "exec_error"
            response["stderr"] += "render produced no image.png\n"
    return response


def serve_loop(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        started = time.monotonic()
        try:
            request = json.loads(line)
            task_id = request["task_id"]
            kind = request.get("kind", "script")
            code = request.get("code", "")
        except (json.JSONDecodeError, KeyError) as exc:
            reply = {
                "task_id": "",
                "status": "exec_error",
                "stdout": "",
                "stderr": f"protocol parse failure: {exc}",
                "wall_ms": 0.0,
            }
            stdout.write(json.dumps(reply) + "\n")
            stdout.flush()
            continue
        workdir = tempfile.mkdtemp(prefix="stubtask-")
        previous = os.getcwd()
        try:
            os.chdir(workdir)
            reply = _execute(code, kind)
        finally:
            os.chdir(previous)
            shutil.rmtree(workdir, ignore_errors=True)
        reply["task_id"] = task_id
        reply["wall_ms"] = (time.monotonic() - started) * 1000.0
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


if __name__ == "__main__":
    serve_loop()
