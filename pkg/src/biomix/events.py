"""Session events and their JSONL encoding."""
from __future__ import annotations

import json
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from .audio import VAPoint

SCHEMA_VERSION = 1


@dataclass
class EmotionalState:
    attention: float
    relaxation: float
    stress_norm: float
    stress_raw: float
    eeg_valid: bool = True
    eeg_imputed: bool = False
    ecg_valid: bool = True
    ecg_imputed: bool = False


@dataclass
class SessionEvent:
    tick: int
    t_s: float
    emotional_state: EmotionalState
    va_dry: VAPoint
    va_fx: list[VAPoint]
    sensor_status: dict
    active_ruleset: str
    fired_rule_index: int
    fired_rule_description: str
    strength: float
    raw_gains: list[float]
    smoothed_gains: list[float]
    ruleset_switched: bool = False
    midi: list[list[int]] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionEvent":
        d = dict(d)
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported session schema_version {version!r}")
        d["emotional_state"] = EmotionalState(**d["emotional_state"])
        d["va_dry"] = VAPoint(**d["va_dry"])
        d["va_fx"] = [VAPoint(**p) for p in d["va_fx"]]
        return cls(**d)


def read_events(path: str | Path) -> Iterator[SessionEvent]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield SessionEvent.from_dict(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: session log schema mismatch: {exc}") from exc


class EventWriter:
    """Single consumer thread appending events to a JSONL file."""

    _STOP = object()

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.count = 0
        self._q: queue.Queue = queue.Queue(maxsize=1024)
        self._thread = threading.Thread(target=self._run, name="event-writer", daemon=True)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
        else:
            self._fh = None
        self._thread.start()

    def write(self, event: SessionEvent) -> None:
        self._q.put(event.to_json())

    def _run(self) -> None:
        while True:
            line = self._q.get()
            if line is self._STOP:
                return
            if self._fh is not None:
                self._fh.write(line + "\n")
            self.count += 1

    def close(self) -> None:
        self._q.put(self._STOP)
        self._thread.join()
        if self._fh is not None:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
