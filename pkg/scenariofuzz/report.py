"""
Campaign summary: error counts per misbehavior kind per agent, written as
report.json (deterministic), report.md (rendered from templates/report.md.j2)
and timing.json (wall-clock figures kept apart so reruns stay byte-identical).
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from jinja2 import Template

from .sim import MISBEHAVIOR_KINDS
from .state import CampaignState

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_MD = "report.md"
TIMING_JSON = "timing.json"


def summarize(state: CampaignState) -> Dict:
    by_system: Dict[str, Dict[str, int]] = {}
    executions: Dict[str, int] = {}
    by_seed: Dict[str, int] = {}
    for entry in state.entries:
        system = entry.record.system
        executions[system] = executions.get(system, 0) + 1
        counts = by_system.setdefault(system, {k: 0 for k in MISBEHAVIOR_KINDS})
        for kind in entry.kinds:
            counts[kind] += 1
        if entry.error_id is not None:
            by_seed[entry.seed_id] = by_seed.get(entry.seed_id, 0) + 1
    totals = {k: sum(c[k] for c in by_system.values()) for k in MISBEHAVIOR_KINDS}
    return {
        "executions": len(state.entries),
        "errors": len(state.errors),
        "cycles": state.cycles_run,
        "sem_trained_on": state.sem_trained_on,
        "by_kind": totals,
        "by_system": {s: {"executions": executions[s], "kinds": by_system[s]} for s in sorted(by_system)},
        "by_seed": dict(sorted(by_seed.items())),
        "error_ids": list(state.errors),
    }


def timing(state: CampaignState) -> Dict:
    seconds = state.exec_seconds
    return {
        "executions": len(seconds),
        "total_seconds": float(np.sum(seconds)) if seconds else 0.0,
        "mean_seconds": float(np.mean(seconds)) if seconds else 0.0,
    }


def write_report(state_dir: Path) -> Tuple[Path, Path]:
    state_dir = Path(state_dir)
    state = CampaignState.load(state_dir)
    summary = summarize(state)
    times = timing(state)

    json_path = state_dir / REPORT_JSON
    json_path.write_text(json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8")
    (state_dir / TIMING_JSON).write_text(json.dumps(times, sort_keys=True, indent=1), encoding="utf-8")

    template_path = Path(__file__).parent / "templates" / "report.md.j2"
    logger.debug(f"Rendering report from {template_path}")
    md = Template(template_path.read_text(encoding="utf-8")).render(
        summary=summary, timing=times, kinds=MISBEHAVIOR_KINDS, state_dir=str(state_dir)
    )
    md_path = state_dir / REPORT_MD
    md_path.write_text(md, encoding="utf-8")
    logger.info("Wrote %s and %s", json_path, md_path)
    return json_path, md_path
