"""
Campaign state and its on-disk journals.

Layout of a state directory:

    corpus/<map>.json, corpus/<map>.xodr
    records.jsonl            one test record per execution
    campaign.jsonl           queue moves, cycles, discoveries, SEM swaps, timings
    errors/<id>/             scenario.json, trace.jsonl, events.json, meta.json
    sem/<n>.ckpt             model trained on the first n records
    report.json, report.md, timing.json

Every record line is written before the in-memory state changes, so
`CampaignState.load` after a crash yields exactly the state before it.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional

from . import logdb
from .corpus import corpus_path, load_corpus
from .errors import ConfigError, MissingArtifacts
from .map_model import build_topology, load_map
from .mutation import ConcreteScenario
from .sem import TestRecord
from .sim import Outcome, Scene, Trace

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
CAMPAIGN_FILE = "campaign.jsonl"
ERRORS_DIR = "errors"
SEM_DIR = "sem"


def error_id(n: int) -> str:
    return f"e{n:05d}"


@dataclass
class RecordEntry:
    index: int
    seed_id: str
    cycle: int
    record: TestRecord
    kinds: List[str]
    status: str
    rng_seed: int
    error_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed_id": self.seed_id,
            "cycle": self.cycle,
            "system": self.record.system,
            "label": self.record.label,
            "score": self.record.score,
            "kinds": self.kinds,
            "status": self.status,
            "rng_seed": self.rng_seed,
            "error_id": self.error_id,
            "scenario": self.record.scenario.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecordEntry":
        record = TestRecord(ConcreteScenario.from_dict(d["scenario"]), bool(d["label"]), d["system"], d["score"])
        return cls(d["index"], d["seed_id"], d["cycle"], record, list(d["kinds"]), d["status"], d["rng_seed"], d["error_id"])


@dataclass
class CampaignState:
    state_dir: Path
    queue: Deque[str] = field(default_factory=deque)
    frequency: Dict[str, int] = field(default_factory=dict)
    entries: List[RecordEntry] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)
    cycles_run: int = 0
    sem_trained_on: int = 0
    exec_seconds: List[float] = field(default_factory=list)

    @property
    def records(self) -> List[TestRecord]:
        return [e.record for e in self.entries]

    @property
    def records_path(self) -> Path:
        return self.state_dir / RECORDS_FILE

    @property
    def campaign_path(self) -> Path:
        return self.state_dir / CAMPAIGN_FILE

    def error_dir(self, eid: str) -> Path:
        return self.state_dir / ERRORS_DIR / eid

    def snapshot(self) -> dict:
        """Comparable view of everything the journals restore."""
        return {
            "queue": list(self.queue),
            "frequency": dict(self.frequency),
            "records": [e.to_dict() for e in self.entries],
            "errors": list(self.errors),
            "cycles_run": self.cycles_run,
            "sem_trained_on": self.sem_trained_on,
        }

    # -------------------------------------------------------------- queue

    def log(self, event_type: str, data: dict) -> None:
        logdb.append_event(self.campaign_path, event_type, data)

    def enqueue(self, seed_id: str, reason: str) -> None:
        self.log("enqueue", {"seed": seed_id, "reason": reason})
        self.queue.append(seed_id)

    def dequeue(self) -> str:
        seed_id = self.queue[0]
        self.log("select", {"seed": seed_id, "frequency": self.frequency.get(seed_id, 0) + 1})
        self.queue.popleft()
        self.frequency[seed_id] = self.frequency.get(seed_id, 0) + 1
        return seed_id

    def start_cycle(self, seed_id: str, cycle: int, strategy: str, mutants: List[str], chosen: List[int]) -> int:
        number = self.cycles_run
        self.log("cycle", {"seed": seed_id, "cycle": cycle, "number": number, "strategy": strategy, "mutants": mutants, "chosen": chosen})
        self.cycles_run += 1
        return number

    def sem_swapped(self, trained_on: int, path: Path, metrics: dict) -> None:
        self.log("sem", {"trained_on": trained_on, "path": str(path), "metrics": metrics})
        self.sem_trained_on = trained_on

    # -------------------------------------------------------------- records

    def record_test(
        self,
        seed_id: str,
        cycle: int,
        record: TestRecord,
        outcome: Outcome,
        trace: Trace,
        seconds: float,
    ) -> RecordEntry:
        """Persist one execution (error artifacts first, then the record line) and fold it into memory."""
        eid = error_id(len(self.errors)) if outcome.is_error else None
        entry = RecordEntry(len(self.entries), seed_id, cycle, record, list(outcome.kinds), outcome.status, trace.rng_seed, eid)
        if eid is not None:
            directory = self.error_dir(eid)
            trace.write(directory, outcome)
            meta = {
                "id": eid,
                "seed_id": seed_id,
                "map": trace.scenario.seed_id.rsplit("-", 1)[0],
                "system": record.system,
                "agent_version": trace.agent_version,
                "rng_seed": trace.rng_seed,
                "kinds": entry.kinds,
                "weather": asdict(trace.scenario.weather),
                "object_styles": [o.appearance.name for o in trace.scenario.objects],
            }
            (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
        logdb.append_line(self.records_path, entry.to_dict())
        self.entries.append(entry)
        self.exec_seconds.append(seconds)
        if eid is not None:
            self.errors.append(eid)
            self.log("error", {"id": eid, "seed": seed_id, "kinds": entry.kinds})
        self.log("execution", {"index": entry.index, "seconds": round(seconds, 6)})
        return entry

    # -------------------------------------------------------------- reload

    @classmethod
    def load(cls, state_dir: Path) -> "CampaignState":
        state = cls(Path(state_dir))
        for line in logdb.iter_lines(state.records_path):
            entry = RecordEntry.from_dict(line)
            if entry.index != len(state.entries):
                raise ConfigError(f"{state.records_path} is out of order at record {entry.index}")
            state.entries.append(entry)
            if entry.error_id is not None:
                state.errors.append(entry.error_id)
        for event in logdb.iter_lines(state.campaign_path):
            data = event.get("data", {})
            kind = event.get("type")
            if kind == "enqueue":
                state.queue.append(data["seed"])
            elif kind == "select":
                if state.queue and state.queue[0] == data["seed"]:
                    state.queue.popleft()
                state.frequency[data["seed"]] = state.frequency.get(data["seed"], 0) + 1
            elif kind == "cycle":
                state.cycles_run = data["number"] + 1
            elif kind == "sem":
                state.sem_trained_on = data["trained_on"]
            elif kind == "execution" and data["index"] < len(state.entries):
                state.exec_seconds.append(data["seconds"])
        logger.info(
            "Loaded campaign state from %s: %d records, %d errors, %d queued",
            state.state_dir, len(state.entries), len(state.errors), len(state.queue),
        )
        return state

    def has_history(self) -> bool:
        return self.records_path.exists() or self.campaign_path.exists()


def load_scene(state_dir: Path, map_name: str) -> Scene:
    """Rebuild the simulation scene from the map copy stored next to the corpus."""
    json_path = corpus_path(state_dir, map_name)
    xodr_path = json_path.with_suffix(".xodr")
    missing = [p.name for p in (json_path, xodr_path) if not p.exists()]
    if missing:
        raise MissingArtifacts(f"{json_path.parent} lacks {', '.join(missing)}")
    net = load_map(xodr_path)
    return Scene(net, build_topology(net, load_corpus(json_path).spacing))
