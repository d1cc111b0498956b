"""
Exception hierarchy for scenariofuzz plus on-error suggestions for the CLI.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List


class ScenarioFuzzError(RuntimeError):
    """Base class for every error raised by scenariofuzz."""


# map_model
class MalformedXml(ScenarioFuzzError):
    pass


class MissingGeometry(ScenarioFuzzError):
    pass


class DanglingLink(ScenarioFuzzError):
    pass


class InvalidRoadValue(ScenarioFuzzError):
    """Non-positive road length or lane width."""


class EmptyGraph(ScenarioFuzzError):
    pass


class NotReachable(ScenarioFuzzError):
    pass


# corpus / mutation
class NoMatch(ScenarioFuzzError):
    pass


class SeedHasNoPaths(ScenarioFuzzError):
    pass


# sem
class InconsistentSeed(ScenarioFuzzError):
    pass


class ShapeMismatch(ScenarioFuzzError):
    pass


class InsufficientData(ScenarioFuzzError):
    pass


class DegenerateLabels(UserWarning):
    """Emitted (not raised) when every label in a set belongs to one class."""


# sim
class SpawnCollision(ScenarioFuzzError):
    pass


class AgentFault(ScenarioFuzzError):
    def __init__(self, message: str, tick: int = 0):
        super().__init__(message)
        self.tick = tick


class EmptyTrace(ScenarioFuzzError):
    pass


# analysis
class NoCollision(ScenarioFuzzError):
    pass


class MissingArtifacts(ScenarioFuzzError):
    pass


class ConfigError(ScenarioFuzzError):
    pass


@dataclass
class ErrorReport:
    error: str
    message: str
    hints: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"error": self.error, "message": self.message, "hints": self.hints}


def on_exception_hints(exc: BaseException) -> ErrorReport:
    """Map an exception to a short report with actionable hints."""
    name = type(exc).__name__
    text = str(exc)
    if isinstance(exc, (MalformedXml, MissingGeometry, DanglingLink, InvalidRoadValue)):
        hints = [
            "Only road/planView(line, arc)/lanes/link/junction/signal elements are read.",
            "Check that every link elementId names a road or junction present in the file.",
        ]
    elif isinstance(exc, NoMatch):
        hints = [
            "No seed matches the campaign filter.",
            "Relax filter.road_type / filter.traffic_light or rebuild the corpus: scenariofuzz corpus build --map <file>",
        ]
    elif isinstance(exc, MissingArtifacts):
        hints = ["Replay needs errors/<id>/{scenario.json,trace.jsonl,meta.json} and corpus/<map>.xodr in the state dir."]
    elif isinstance(exc, InsufficientData):
        hints = ["Collect more executions (or error scenarios) before training or clustering."]
    elif isinstance(exc, ConfigError):
        hints = ["Compare your config with configs/acceptance.yaml; unknown keys are rejected."]
    elif isinstance(exc, AgentFault):
        hints = ["The agent under test raised; see cli.log in the state dir for the traceback."]
    else:
        hints = ["See cli.log in the state dir for details."]
    return ErrorReport(name, text, hints)
