"""Raw protocol behavior of the rendering worker (no broker involved)."""

from __future__ import annotations

import base64
import io
import json
import subprocess
import sys

from PIL import Image

WORKER_CMD = [sys.executable, "-m", "chartworker"]


def talk(requests: list[dict | str], timeout=120) -> list[dict]:
    """Send request lines to a fresh worker, return its response lines."""
    payload = "\n".join(r if isinstance(r, str) else json.dumps(r) for r in requests) + "\n"
    proc = subprocess.run(
        WORKER_CMD, input=payload, capture_output=True, text=True, timeout=timeout
    )
    assert proc.returncode == 0, proc.stderr
    return [json.loads(line) for line in proc.stdout.splitlines() if line.strip()]


def req(task_id, code, kind="script", timeout_s=30.0):
    return {"task_id": task_id, "kind": kind, "code": code, "timeout_s": timeout_s}


class TestScripts:
    def test_print_capture(self):
        (reply,) = talk([req("a", 'print("3.14")')])
        assert reply["status"] == "ok"
        assert reply["stdout"] == "3.14\n"

    def test_exception_reports_traceback_tail(self):
        (reply,) = talk([req("a", 'raise ValueError("bad slope")')])
        assert reply["status"] == "exec_error"
        assert "bad slope" in reply["stderr"]
        assert "Traceback" in reply["stderr"]

    def test_stateless_repeat_identical_stdout(self):
        code = "import random\nrandom.seed(4)\nprint(random.random())"
        first, second = talk([req("a", code), req("b", code)])
        assert first["stdout"] == second["stdout"]

    def test_fresh_globals_between_tasks(self):
        replies = talk([req("a", "leak = 42\nprint('set')"), req("b", "print('leak' in dir())")])
        assert replies[1]["stdout"].strip() == "False"

    def test_fresh_empty_working_directory(self):
        replies = talk(
            [
                req("a", "open('scratch.txt', 'w').write('x')\nprint('wrote')"),
                req("b", "import os\nprint(sorted(os.listdir('.')))"),
            ]
        )
        assert replies[1]["stdout"].strip() == "[]"

    def test_stdout_truncated_at_64k(self):
        (reply,) = talk([req("a", "print('x' * 200000)")])
        assert len(reply["stdout"]) <= 64 * 1024

    def test_os_write_to_fd1_does_not_corrupt_protocol(self):
        code = "import os\nos.write(1, b'raw bytes straight to fd 1\\n')\nprint('clean')"
        (reply,) = talk([req("a", code)])
        assert reply["status"] == "ok"
        assert reply["stdout"] == "clean\n"


class TestRendering:
    def test_bar_chart_renders_png(self):
        code = (
            "import matplotlib.pyplot as plt\n"
            "fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=100)\n"
            "ax.bar(['a', 'b', 'c'], [3, 1, 2])\n"
            "fig.savefig('image.png')\n"
        )
        (reply,) = talk([req("r", code, kind="render")])
        assert reply["status"] == "ok"
        image = Image.open(io.BytesIO(base64.b64decode(reply["artifact_b64"])))
        assert image.size == (320, 240)

    def test_missing_artifact_is_exec_error(self):
        (reply,) = talk([req("r", "print('no figure saved')", kind="render")])
        assert reply["status"] == "exec_error"
        assert "image.png" in reply["stderr"]

    def test_plt_show_is_inert(self):
        code = (
            "import matplotlib.pyplot as plt\n"
            "plt.plot([1, 2], [2, 1])\n"
            "plt.show()\n"
            "plt.savefig('image.png')\n"
        )
        (reply,) = talk([req("r", code, kind="render")])
        assert reply["status"] == "ok"


class TestLimits:
    def test_wall_clock_timeout(self):
        (reply,) = talk([req("slow", "while True: pass", timeout_s=1.0)])
        assert reply["status"] == "timeout"
        assert reply["wall_ms"] < 3000

    def test_sleep_timeout(self):
        (reply,) = talk([req("nap", "import time\ntime.sleep(30)", timeout_s=1.0)])
        assert reply["status"] == "timeout"

    def test_network_denied(self):
        code = "import socket\nsocket.socket()\nprint('connected')"
        (reply,) = talk([req("net", code)])
        assert reply["status"] == "exec_error"
        assert "disabled" in reply["stderr"]

    def test_worker_survives_after_timeout(self):
        replies = talk([req("slow", "while True: pass", timeout_s=1.0), req("ok", "print('alive')")])
        assert [r["status"] for r in replies] == ["timeout", "ok"]


class TestProtocolEdges:
    def test_garbage_line_answered_and_loop_continues(self):
        replies = talk(["this is not json", json.dumps(req("after", "print('ok')"))])
        assert replies[0]["status"] == "exec_error"
        assert "parse" in replies[0]["stderr"]
        assert replies[1]["stdout"] == "ok\n"

    def test_clean_exit_on_stdin_close(self):
        proc = subprocess.run(WORKER_CMD, input="", capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0
