"""Append-only run ledger with checkpoint/resume semantics.

Every record passing through a stage ends in exactly one terminal
action (retained / dropped / failed); ``emitted`` events are
informational.  Resume reads the ledger back and skips records that
already have a terminal action for the stage, so a restarted run never
re-invokes model endpoints for completed work.  In canonical mode the
timestamp field is pinned to 0 so output trees are byte-comparable.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import LedgerError

TERMINAL_ACTIONS = ("retained", "dropped", "failed")
ACTIONS = TERMINAL_ACTIONS + ("emitted",)


@dataclass(frozen=True)
class LedgerEvent:
    stage: str
    record_id: str
    action: str
    cause: str
    ts: float


class RunLedger:
    def __init__(self, path: str | Path, canonical: bool = False):
        self.path = Path(path)
        self.canonical = canonical
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, stage: str, record_id: str, action: str, cause: str = "") -> None:
        if action not in ACTIONS:
            raise LedgerError(f"unknown ledger action {action!r}")
        event = {
            "stage": stage,
            "record_id": record_id,
            "action": action,
            "cause": cause,
            "ts": 0 if self.canonical else time.time(),
        }
        line = json.dumps(event, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def events(self) -> list[LedgerEvent]:
        """Parse the full log; a corrupt line halts with its position."""
        if not self.path.exists():
            return []
        out: list[LedgerEvent] = []
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    out.append(
                        LedgerEvent(
                            obj["stage"], obj["record_id"], obj["action"], obj.get("cause", ""), obj["ts"]
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise LedgerError(f"corrupt ledger line {lineno} in {self.path}: {exc}") from exc
        return out

    def terminal_actions(self, stage: str) -> dict[str, str]:
        """record_id -> terminal action; duplicates are an integrity error."""
        seen: dict[str, str] = {}
        for event in self.events():
            if event.stage != stage or event.action not in TERMINAL_ACTIONS:
                continue
            if event.record_id in seen:
                raise LedgerError(
                    f"duplicate terminal action for ({stage}, {event.record_id}): "
                    f"{seen[event.record_id]} then {event.action}"
                )
            seen[event.record_id] = event.action
        return seen

    def pending(self, stage: str, record_ids: Sequence[str]) -> list[str]:
        """The work items of a stage that have no terminal action yet."""
        done = self.terminal_actions(stage)
        return [rid for rid in record_ids if rid not in done]

    def counts(self, stage: str) -> dict[str, int]:
        out = {action: 0 for action in ACTIONS}
        for event in self.events():
            if event.stage == stage:
                out[event.action] += 1
        return out


def check_conservation(ledger: RunLedger, stage: str, input_ids: Iterable[str]) -> None:
    """Every input id must hold exactly one terminal action for the stage."""
    done = ledger.terminal_actions(stage)
    missing = [rid for rid in input_ids if rid not in done]
    if missing:
        raise LedgerError(f"stage {stage} lost records: {missing[:5]} (+{max(0, len(missing) - 5)} more)")
