"""
Structured event journal.

Writes JSONL entries `{"ts", "type", "data"}` so a campaign can be replayed
after a crash and inspected by tooling.
"""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Iterator, List

logger = logging.getLogger(__name__)


def append_event(path: Path, event_type: str, data: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "ts": int(time.time()),
        "type": event_type,
        "data": data,
    }
    append_line(path, entry)


def append_line(path: Path, entry: Dict[str, Any]) -> None:
    """Append one JSON object and fsync so the line survives a crash."""
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
        f.flush()
        os.fsync(f.fileno())


def iter_lines(path: Path) -> Iterator[Dict[str, Any]]:
    """Yield complete JSON lines; a torn trailing line is skipped."""
    if not path.exists():
        return
    with path.open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                logger.warning("Skipping torn journal line %d in %s", number, path)


def read_events(path: Path, event_type: str | None = None) -> List[Dict[str, Any]]:
    return [e for e in iter_lines(path) if event_type is None or e.get("type") == event_type]
