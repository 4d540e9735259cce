"""Append-only NDJSON event log: oracle/user answers, labels, threshold
adjustments and retraining decisions. Replaying the log against the same
config and seeds reconstructs all downstream state."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Iterator


class EventLog:
    """One NDJSON file, append-only; every record carries seq and ts."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._seq = sum(1 for _ in self.iter_events()) if self.path.exists() else 0

    def append(self, event: dict) -> dict:
        record = {"seq": self._seq, "ts": time.time()}
        record.update(event)
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()
        self._seq += 1
        return record

    def iter_events(self) -> Iterator[dict]:
        if not self.path.exists():
            return
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def __len__(self):
        return self._seq
