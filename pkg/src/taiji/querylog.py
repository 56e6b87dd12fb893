"""Append-only query log (JSON lines)."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional


@dataclass(frozen=True)
class QueryLogEntry:
    timestamp: float
    nl_query: str
    plan_signature: str
    outcome: str  # ok | error
    latency_ms: float
    plan: Optional[dict] = None
    error: str = ""

    def __post_init__(self):
        if self.outcome not in ("ok", "error"):
            raise ValueError(f"outcome must be ok or error, not {self.outcome!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "QueryLogEntry":
        return cls(**doc)


class QueryLog:
    """In-memory log, mirrored to ``path`` when given.

    ``listeners`` are called with each appended entry.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self._entries: list[QueryLogEntry] = []
        self._lock = threading.Lock()
        self.listeners: list[Callable[[QueryLogEntry], None]] = []
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._entries.append(QueryLogEntry.from_json(json.loads(line)))

    def append(self, entry: QueryLogEntry) -> None:
        with self._lock:
            self._entries.append(entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        for cb in list(self.listeners):
            cb(entry)

    def entries(self, since: float = float("-inf"), until: float = float("inf")) -> list[QueryLogEntry]:
        """Entries with ``since <= timestamp <= until``, in append order."""
        with self._lock:
            return [e for e in self._entries if since <= e.timestamp <= until]

    def __len__(self) -> int:
        return len(self._entries)


def now() -> float:
    return time.time()
