"""Reusable conformance checks for broker workers.

Payload builders emit code that is simultaneously valid for the stub
worker (via ``#:`` directives) and for a real Python-executing worker
(the directives are comments), so the same suite verifies protocol
conformance of both runtimes.  Each check raises AssertionError on
violation; ``run_protocol_suite`` runs them all against a worker
command.
"""

from __future__ import annotations

import io
import random
from concurrent.futures import ThreadPoolExecutor

from PIL import Image

from .broker import ExecutionBroker, ExecutionTask
from .errors import ExecutionFailedError, WorkerProtocolError


def echo_code(*lines: str) -> str:
    directives = "\n".join(f"#: print {line}" for line in lines)
    prints = "\n".join(f"print({line!r})" for line in lines)
    return f"{directives}\n{prints}\n"


def sleep_code(seconds: float) -> str:
    return f"#: sleep {seconds}\nimport time\ntime.sleep({seconds})\n"


def error_code(message: str) -> str:
    return f"#: error {message}\nraise RuntimeError({message!r})\n"


def crash_code() -> str:
    return "#: crash\nimport os\nos._exit(13)\n"


def silent_code() -> str:
    return "#: noop\nvalue = 1 + 1\n"


def render_code(width: int = 64, height: int = 48) -> str:
    return (
        f"#: png {width} {height}\n"
        "import matplotlib\n"
        'matplotlib.use("Agg")\n'
        "import matplotlib.pyplot as plt\n"
        f"fig = plt.figure(figsize=({width / 100}, {height / 100}), dpi=100)\n"
        "plt.plot([0, 1], [1, 0])\n"
        'fig.savefig("image.png")\n'
    )


def sentinel_code(name: str) -> str:
    return (
        f"#: sentinel {name}\n"
        "import os, time\n"
        f'open("{name}.sentinel", "w").write("{name}")\n'
        "time.sleep(0.01)\n"
        'names = sorted(n for n in os.listdir(".") if n.endswith(".sentinel"))\n'
        'print("SENTINELS " + ",".join(names))\n'
    )


def check_script_echo(broker: ExecutionBroker) -> None:
    result = broker.submit(ExecutionTask("echo", "script", echo_code("42")))
    assert result.status == "ok", result
    assert result.final_print == "42", result


def check_multiline_final_print(broker: ExecutionBroker) -> None:
    answer = broker.run_script(echo_code("banner", "7.5"))
    assert answer == "7.5", answer


def check_exec_error(broker: ExecutionBroker) -> None:
    result = broker.submit(ExecutionTask("boom", "script", error_code("deliberate failure")))
    assert result.status == "exec_error", result
    assert "deliberate failure" in result.stderr_tail, result


def check_timeout(broker: ExecutionBroker, timeout_s: float = 1.0) -> None:
    result = broker.submit(ExecutionTask("slow", "script", sleep_code(10), timeout_s=timeout_s))
    assert result.status == "timeout", result
    assert result.wall_ms < (timeout_s + 2.0) * 1000.0, result.wall_ms


def check_crash_recovery(broker: ExecutionBroker) -> None:
    result = broker.submit(ExecutionTask("die", "script", crash_code(), timeout_s=5.0))
    assert result.status == "worker_crash", result
    after = broker.submit(ExecutionTask("alive", "script", echo_code("back")))
    assert after.status == "ok" and after.final_print == "back", after


def check_empty_print_is_protocol_error(broker: ExecutionBroker) -> None:
    try:
        broker.run_script(silent_code())
    except WorkerProtocolError:
        return
    raise AssertionError("run_script accepted a script that printed nothing")


def check_render_png(broker: ExecutionBroker, width: int = 64, height: int = 48) -> tuple[int, int]:
    artifact = broker.render_chart(render_code(width, height), timeout_s=30.0)
    image = Image.open(io.BytesIO(artifact))
    assert image.size == (width, height), image.size
    return image.size


def check_render_failure_maps_status(broker: ExecutionBroker) -> None:
    try:
        broker.render_chart(error_code("no chart today"))
    except ExecutionFailedError as exc:
        assert exc.status == "exec_error", exc.status
        return
    raise AssertionError("render_chart swallowed a failing task")


def check_isolation(broker: ExecutionBroker, tasks: int = 100) -> None:
    def one(i: int) -> str:
        result = broker.submit(ExecutionTask(f"iso{i}", "script", sentinel_code(f"t{i}")))
        assert result.status == "ok", result
        return result.final_print or ""

    with ThreadPoolExecutor(max_workers=16) as pool:
        outputs = list(pool.map(one, range(tasks)))
    contaminated = [out for i, out in enumerate(outputs) if out != f"SENTINELS t{i}.sentinel"]
    assert contaminated == [], contaminated


def check_no_task_dropped(broker: ExecutionBroker, tasks: int = 40, seed: int = 5) -> None:
    # Sleep payloads get a tight deadline to force the timeout path; the
    # rest get a generous one so worker respawn latency cannot skew their
    # expected status.
    rng = random.Random(seed)
    payloads = []
    for i in range(tasks):
        roll = rng.random()
        if roll < 0.2:
            payloads.append(("worker_crash", crash_code(), 30.0))
        elif roll < 0.4:
            payloads.append(("exec_error", error_code(f"fuzz {i}"), 30.0))
        elif roll < 0.5:
            payloads.append(("timeout", sleep_code(8), 0.5))
        else:
            payloads.append(("ok", echo_code(str(i)), 30.0))

    def one(arg):
        i, (expected, code, timeout_s) = arg
        result = broker.submit(ExecutionTask(f"fuzz{i}", "script", code, timeout_s=timeout_s))
        return expected, result.status

    with ThreadPoolExecutor(max_workers=8) as pool:
        resolved = list(pool.map(one, enumerate(payloads)))
    assert len(resolved) == tasks
    for expected, actual in resolved:
        assert actual == expected, (expected, actual)


def run_protocol_suite(worker_cmd: list[str], pool_size: int = 4, isolation_tasks: int = 100) -> None:
    """Run every conformance check against a worker command."""
    with ExecutionBroker(worker_cmd, pool_size=pool_size) as broker:
        check_script_echo(broker)
        check_multiline_final_print(broker)
        check_exec_error(broker)
        check_timeout(broker)
        check_crash_recovery(broker)
        check_empty_print_is_protocol_error(broker)
        check_render_png(broker)
        check_render_failure_maps_status(broker)
        check_isolation(broker, tasks=isolation_tasks)
        check_no_task_dropped(broker)
