"""
Scenario mutation: four mutators (mission, puddle, object, weather) driven by
either Random sampling or Random-Neighbor sampling around a reference scenario.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import ScenarioSeed
from .errors import SeedHasNoPaths
from .map_model import normalize_angle

logger = logging.getLogger(__name__)

SCENARIO_SCHEMA = 1
NEIGHBOR_STEPS = 5


class ScenarioSpace:
    """Mutation ranges and step sizes."""

    MAX_OBJECTS = 8
    MAX_PUDDLES = 5

    PEDESTRIAN_SPEED = (1.0, 4.0)
    VEHICLE_SPEED = (3.0, 10.0)
    SPEED_STEP = 0.1

    PUDDLE_RADIUS = (0.5, 3.0)
    RADIUS_STEP = 0.1
    PUDDLE_FRICTION = (0.1, 1.0)
    FRICTION_STEP = 0.01

    WEATHER_PERCENT_STEP = 1.0
    ANGLE_STEP = 1.0
    TURN_SPREAD_DEG = 20.0
    SEGMENT_LENGTH = 8.0
    SEGMENT_TURN_DEG = 5.0

    CROSSING_MAX_WIDTH = 8.0


class ObjectKind(str, Enum):
    VEHICLE = "Vehicle"
    PEDESTRIAN = "Pedestrian"


class ActionKind(str, Enum):
    IMMOBILE = "Immobile"
    LINEAR = "Linear"
    MANEUVER = "Maneuver"
    AUTOPILOT = "Autopilot"


class Strategy(str, Enum):
    RANDOM = "Random"
    NEIGHBOR = "Neighbor"


VEHICLE_ACTIONS = (ActionKind.IMMOBILE.value, ActionKind.LINEAR.value, ActionKind.MANEUVER.value, ActionKind.AUTOPILOT.value)
PEDESTRIAN_ACTIONS = (ActionKind.IMMOBILE.value, ActionKind.LINEAR.value)

COLORS: Dict[str, Optional[Tuple[int, int, int]]] = {
    "none": None,
    "red": (255, 0, 0),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "silver": (192, 192, 192),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}


@dataclass(frozen=True)
class Appearance:
    id: int
    kind: str
    name: str
    length: float
    width: float
    height: float


_V, _P = ObjectKind.VEHICLE.value, ObjectKind.PEDESTRIAN.value
APPEARANCES: Tuple[Appearance, ...] = (
    Appearance(0, _V, "sedan", 4.6, 1.8, 1.45),
    Appearance(1, _V, "hatchback", 4.0, 1.75, 1.5),
    Appearance(2, _V, "suv", 4.7, 1.9, 1.75),
    Appearance(3, _V, "van", 4.9, 2.0, 2.1),
    Appearance(4, _V, "pickup", 4.9, 1.95, 1.85),
    Appearance(5, _V, "sports_car", 4.4, 1.9, 1.2),
    Appearance(6, _V, "taxi", 4.6, 1.8, 1.5),
    Appearance(7, _V, "police_car", 4.7, 1.85, 1.5),
    Appearance(8, _V, "microcar", 2.7, 1.6, 1.55),
    Appearance(9, _V, "delivery_truck", 4.9, 2.1, 2.8),
    Appearance(10, _V, "minibus", 4.9, 2.0, 2.3),
    Appearance(11, _V, "bicycle_rider", 1.8, 0.6, 1.7),
    Appearance(12, _V, "motorcycle_rider", 2.2, 0.8, 1.6),
    Appearance(13, _P, "adult_male", 0.5, 0.5, 1.8),
    Appearance(14, _P, "adult_female", 0.5, 0.5, 1.65),
    Appearance(15, _P, "elderly", 0.5, 0.5, 1.6),
    Appearance(16, _P, "teenager", 0.5, 0.5, 1.6),
    Appearance(17, _P, "runner", 0.5, 0.5, 1.75),
    Appearance(18, _P, "worker", 0.5, 0.5, 1.8),
    Appearance(19, _P, "police_officer", 0.5, 0.5, 1.8),
    Appearance(20, _P, "tourist", 0.6, 0.6, 1.7),
    Appearance(21, _P, "wheelchair_user", 1.1, 0.7, 1.3),
    Appearance(22, _P, "stroller_parent", 1.2, 0.6, 1.7),
    Appearance(23, _P, "crouching_worker", 0.8, 0.6, 1.0),
    Appearance(24, _P, "child", 0.4, 0.4, 0.9),
    Appearance(25, _P, "lying_adult", 1.8, 0.6, 0.4),
)
STYLES_PER_KIND = 13


@dataclass(frozen=True)
class AttributeMeta:
    """Continuous range with a step, or an ordered discrete choice set."""

    low: Optional[float] = None
    high: Optional[float] = None
    step: Optional[float] = None
    choices: Optional[Tuple[Any, ...]] = None

    @classmethod
    def continuous(cls, low: float, high: float, step: float) -> "AttributeMeta":
        return cls(low=float(low), high=float(high), step=float(step))

    @classmethod
    def discrete(cls, choices: Sequence[Any]) -> "AttributeMeta":
        return cls(choices=tuple(choices))

    @property
    def is_discrete(self) -> bool:
        return self.choices is not None

    def accepts(self, value: Any) -> bool:
        if self.is_discrete:
            return value in self.choices
        return isinstance(value, (int, float)) and self.low <= value <= self.high


@dataclass(frozen=True)
class Random:
    pass


@dataclass(frozen=True)
class Neighbor:
    current: Any


RANDOM = Random()


def sample_attribute(meta: AttributeMeta, mode: Union[Random, Neighbor], rng: np.random.Generator):
    """Draw one value; Neighbor stays within five steps (or positions) of the current value."""
    if meta.is_discrete:
        n = len(meta.choices)
        if isinstance(mode, Neighbor) and mode.current in meta.choices:
            idx = meta.choices.index(mode.current)
            lo, hi = max(0, idx - NEIGHBOR_STEPS), min(n - 1, idx + NEIGHBOR_STEPS)
            return meta.choices[int(rng.integers(lo, hi + 1))]
        return meta.choices[int(rng.integers(n))]
    if isinstance(mode, Neighbor) and isinstance(mode.current, (int, float)):
        lo = max(meta.low, mode.current - NEIGHBOR_STEPS * meta.step)
        hi = min(meta.high, mode.current + NEIGHBOR_STEPS * meta.step)
        if lo <= hi:
            return float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return float(rng.uniform(meta.low, meta.high))


@dataclass(frozen=True)
class WeatherParams:
    cloud: float = 0.0
    rain: float = 0.0
    ponding: float = 0.0
    wind: float = 0.0
    fog: float = 0.0
    wetness: float = 0.0
    sun_angle: float = 0.0
    sun_altitude: float = 45.0

    def vector(self) -> Tuple[float, ...]:
        return (self.cloud, self.rain, self.ponding, self.wind, self.fog, self.wetness, self.sun_angle, self.sun_altitude)


WEATHER_SPACE: Dict[str, AttributeMeta] = {
    "cloud": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "rain": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "ponding": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "wind": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "fog": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "wetness": AttributeMeta.continuous(0, 100, ScenarioSpace.WEATHER_PERCENT_STEP),
    "sun_angle": AttributeMeta.continuous(0, 360, ScenarioSpace.ANGLE_STEP),
    "sun_altitude": AttributeMeta.continuous(-90, 90, ScenarioSpace.ANGLE_STEP),
}


@dataclass(frozen=True)
class ManeuverSegment:
    direction: str
    turn: float
    speed: float
    length: float


@dataclass(frozen=True)
class Action:
    kind: str
    speed: Optional[float] = None
    segments: Tuple[ManeuverSegment, ...] = ()


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    appearance_id: int
    color: Optional[Tuple[int, int, int]]
    action: Action
    path: Tuple[int, ...]
    spawn: int

    @property
    def appearance(self) -> Appearance:
        return APPEARANCES[self.appearance_id]

    def route_from_spawn(self) -> Tuple[int, ...]:
        return self.path[self.path.index(self.spawn):]


@dataclass(frozen=True)
class PuddleSpec:
    waypoint: int
    radius: float
    friction: float


@dataclass(frozen=True)
class Mission:
    start: int
    path: Tuple[int, ...]
    direction: str


@dataclass(frozen=True)
class AttributeValue:
    name: str
    value: Any
    meta: AttributeMeta


@dataclass(frozen=True)
class ConcreteScenario:
    seed_id: str
    mission: Mission
    objects: Tuple[ObjectSpec, ...] = ()
    puddles: Tuple[PuddleSpec, ...] = ()
    weather: WeatherParams = field(default_factory=WeatherParams)
    attributes: Tuple[AttributeValue, ...] = ()

    def attribute(self, name: str):
        for a in self.attributes:
            if a.name == name:
                return a.value
        raise KeyError(name)

    def to_dict(self) -> dict:
        body = asdict(self)
        body["schema"] = SCENARIO_SCHEMA
        return body

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha1(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ConcreteScenario":
        def action(a):
            return Action(a["kind"], a["speed"], tuple(ManeuverSegment(**s) for s in a["segments"]))

        def meta(m):
            return AttributeMeta(m["low"], m["high"], m["step"], tuple(m["choices"]) if m["choices"] is not None else None)

        return cls(
            seed_id=d["seed_id"],
            mission=Mission(d["mission"]["start"], tuple(d["mission"]["path"]), d["mission"]["direction"]),
            objects=tuple(
                ObjectSpec(
                    o["kind"], o["appearance_id"], tuple(o["color"]) if o["color"] is not None else None,
                    action(o["action"]), tuple(o["path"]), o["spawn"],
                )
                for o in d["objects"]
            ),
            puddles=tuple(PuddleSpec(**p) for p in d["puddles"]),
            weather=WeatherParams(**d["weather"]),
            attributes=tuple(AttributeValue(a["name"], a["value"], meta(a["meta"])) for a in d["attributes"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ConcreteScenario":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- geometry helpers


def _poses(seed: ScenarioSeed, ids: Sequence[int]) -> np.ndarray:
    return np.array([[seed.waypoint(i).x, seed.waypoint(i).y, seed.waypoint(i).heading] for i in ids], dtype=float)


def maneuver_segments(poses: np.ndarray) -> List[Tuple[str, float, float]]:
    """Split a pose polyline into max(1, L // 8) equal segments: (direction, heading change deg, length)."""
    poses = np.asarray(poses, dtype=float)
    steps = np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1]))
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    total = float(cum[-1])
    count = max(1, int(math.floor(total / ScenarioSpace.SEGMENT_LENGTH)))
    unwrapped = np.unwrap(poses[:, 2])
    stations = np.linspace(0.0, total, count + 1)
    headings = np.interp(stations, cum, unwrapped) if total > 0 else np.full(count + 1, unwrapped[0])
    segments = []
    for j in range(count):
        delta = math.degrees(normalize_angle(headings[j + 1] - headings[j]))
        if delta > ScenarioSpace.SEGMENT_TURN_DEG:
            label = "Left"
        elif delta < -ScenarioSpace.SEGMENT_TURN_DEG:
            label = "Right"
        else:
            label = "Straight"
        segments.append((label, delta, total / count))
    return segments


def segment_maneuver_path(
    poses: np.ndarray,
    rng: np.random.Generator,
    draw: Optional[Callable[[str, AttributeMeta], Any]] = None,
) -> Tuple[ManeuverSegment, ...]:
    """Maneuver plan: per segment a turn within ±20° of the path's heading change and a vehicle speed.

    `draw(name, meta)` picks each value; the default draws at random from `rng`.
    """
    if draw is None:
        def draw(name, meta):
            return sample_attribute(meta, RANDOM, rng)
    spread = ScenarioSpace.TURN_SPREAD_DEG
    plan = []
    for j, (label, delta, length) in enumerate(maneuver_segments(poses)):
        turn = draw(f"segment.{j}.turn", AttributeMeta.continuous(delta - spread, delta + spread, ScenarioSpace.ANGLE_STEP))
        speed = draw(f"segment.{j}.speed", AttributeMeta.continuous(*ScenarioSpace.VEHICLE_SPEED, ScenarioSpace.SPEED_STEP))
        plan.append(ManeuverSegment(label, turn, speed, length))
    return tuple(plan)


@lru_cache(maxsize=64)
def crossing_pairs(seed: ScenarioSeed) -> Tuple[Tuple[int, int], ...]:
    """(waypoint, nearest opposite-direction waypoint on the same road) pairs for pedestrians."""
    pairs = []
    members = [w for w in seed.waypoints if w.junction is None]
    for w in members:
        best, best_d = None, ScenarioSpace.CROSSING_MAX_WIDTH
        for other in members:
            if other.road != w.road or (other.lane > 0) == (w.lane > 0):
                continue
            d = math.hypot(other.x - w.x, other.y - w.y)
            if d < best_d or (d == best_d and best is not None and other.id < best):
                best, best_d = other.id, d
        if best is not None:
            pairs.append((w.id, best))
    return tuple(pairs)


# ---------------------------------------------------------------- mutate


@dataclass
class MutationOptions:
    max_objects: int = ScenarioSpace.MAX_OBJECTS
    max_puddles: int = ScenarioSpace.MAX_PUDDLES
    direction: Optional[str] = None


class _Draws:
    """Records every drawn attribute; Neighbor mode applies where the reference holds a usable value."""

    def __init__(self, rng: np.random.Generator, reference: Optional[ConcreteScenario]):
        self.rng = rng
        self.reference = {a.name: a.value for a in reference.attributes} if reference is not None else {}
        self.values: List[AttributeValue] = []

    def mode(self, name: str, meta: AttributeMeta):
        if name in self.reference and meta.accepts(self.reference[name]):
            return Neighbor(self.reference[name])
        return RANDOM

    def draw(self, name: str, meta: AttributeMeta):
        value = sample_attribute(meta, self.mode(name, meta), self.rng)
        self.values.append(AttributeValue(name, value, meta))
        return value

    def claim(self, name: str, meta: AttributeMeta, is_free) -> Optional[Any]:
        """Draw a placement; if taken, scan outward within the allowed window for a free choice."""
        mode = self.mode(name, meta)
        value = sample_attribute(meta, mode, self.rng)
        choices = meta.choices
        idx = choices.index(value)
        if isinstance(mode, Neighbor):
            anchor = choices.index(mode.current)
            window = range(max(0, anchor - NEIGHBOR_STEPS), min(len(choices), anchor + NEIGHBOR_STEPS + 1))
        else:
            window = range(len(choices))
        order = sorted(window, key=lambda i: (abs(i - idx), i))
        for i in order:
            if is_free(choices[i]):
                self.values.append(AttributeValue(name, choices[i], meta))
                return choices[i]
        return None

    def drop(self, prefix: str) -> None:
        self.values = [v for v in self.values if not v.name.startswith(prefix)]


def mutate_scenario(
    seed: ScenarioSeed,
    strategy: Strategy,
    reference: Optional[ConcreteScenario],
    rng: np.random.Generator,
    options: Optional[MutationOptions] = None,
) -> ConcreteScenario:
    """Apply mission, puddle, object and weather mutators to a seed."""
    options = options or MutationOptions()
    if not seed.paths:
        raise SeedHasNoPaths(f"seed {seed.seed_id} has no paths")
    strategy = Strategy(strategy)
    if strategy is Strategy.NEIGHBOR and reference is None:
        raise ValueError("Neighbor mutation needs a reference scenario")
    draws = _Draws(rng, reference if strategy is Strategy.NEIGHBOR else None)

    allowed = [i for i, p in enumerate(seed.paths) if options.direction is None or p.direction == options.direction]
    if not allowed:
        raise SeedHasNoPaths(f"seed {seed.seed_id} has no {options.direction} path")
    ego_path = seed.paths[draws.draw("mission.path", AttributeMeta.discrete(allowed))]
    mission = Mission(ego_path.waypoints[0], ego_path.waypoints, ego_path.direction)
    taken = {mission.start}

    puddles = []
    for i in range(draws.draw("puddles.count", AttributeMeta.discrete(range(options.max_puddles + 1)))):
        puddles.append(
            PuddleSpec(
                waypoint=draws.draw(f"puddle.{i}.waypoint", AttributeMeta.discrete(seed.waypoint_ids)),
                radius=draws.draw(f"puddle.{i}.radius", AttributeMeta.continuous(*ScenarioSpace.PUDDLE_RADIUS, ScenarioSpace.RADIUS_STEP)),
                friction=draws.draw(
                    f"puddle.{i}.friction", AttributeMeta.continuous(*ScenarioSpace.PUDDLE_FRICTION, ScenarioSpace.FRICTION_STEP)
                ),
            )
        )

    objects = []
    crossings = crossing_pairs(seed)
    for i in range(draws.draw("objects.count", AttributeMeta.discrete(range(options.max_objects + 1)))):
        spec = _mutate_object(i, seed, crossings, draws, taken)
        if spec is None:
            draws.drop(f"object.{i}.")
            logger.debug("Seed %s: no free spawn for object %d", seed.seed_id, i)
            continue
        taken.add(spec.spawn)
        objects.append(spec)

    weather = WeatherParams(**{name: draws.draw(f"weather.{name}", meta) for name, meta in WEATHER_SPACE.items()})
    return ConcreteScenario(seed.seed_id, mission, tuple(objects), tuple(puddles), weather, tuple(draws.values))


def _mutate_object(i, seed, crossings, draws: _Draws, taken) -> Optional[ObjectSpec]:
    p = f"object.{i}."
    kind = draws.draw(p + "kind", AttributeMeta.discrete((ObjectKind.VEHICLE.value, ObjectKind.PEDESTRIAN.value)))
    style = draws.draw(p + "style", AttributeMeta.discrete(range(STYLES_PER_KIND)))

    if kind == ObjectKind.PEDESTRIAN.value:
        if not crossings:
            return None
        idx = draws.claim(p + "crossing", AttributeMeta.discrete(range(len(crossings))), lambda c: crossings[c][0] not in taken)
        if idx is None:
            return None
        action_kind = draws.draw(p + "action", AttributeMeta.discrete(PEDESTRIAN_ACTIONS))
        speed = None
        if action_kind == ActionKind.LINEAR.value:
            speed = draws.draw(p + "speed", AttributeMeta.continuous(*ScenarioSpace.PEDESTRIAN_SPEED, ScenarioSpace.SPEED_STEP))
        return ObjectSpec(kind, STYLES_PER_KIND + style, None, Action(action_kind, speed), crossings[idx], crossings[idx][0])

    color = draws.draw(p + "color", AttributeMeta.discrete(tuple(COLORS)))
    action_kind = draws.draw(p + "action", AttributeMeta.discrete(VEHICLE_ACTIONS))
    route = seed.paths[draws.draw(p + "route", AttributeMeta.discrete(range(len(seed.paths))))].waypoints
    candidates = [w for w in route[:-1] if seed.waypoint(w).junction is None]
    if not candidates:
        return None
    spawn = draws.claim(p + "spawn", AttributeMeta.discrete(candidates), lambda w: w not in taken)
    if spawn is None:
        return None
    speed, segments = None, ()
    if action_kind == ActionKind.LINEAR.value:
        speed = draws.draw(p + "speed", AttributeMeta.continuous(*ScenarioSpace.VEHICLE_SPEED, ScenarioSpace.SPEED_STEP))
    elif action_kind == ActionKind.MANEUVER.value:
        poses = _poses(seed, route[route.index(spawn):])
        segments = segment_maneuver_path(poses, draws.rng, lambda name, meta: draws.draw(p + name, meta))
    return ObjectSpec(kind, style, COLORS[color], Action(action_kind, speed, segments), route, spawn)


def spawn_rng(campaign_seed: int, cycle: int, index: int) -> np.random.Generator:
    """Independent generator per (campaign seed, cycle, mutant index)."""
    return np.random.default_rng([int(campaign_seed), int(cycle), int(index)])


def export_attributes_csv(scenario: ConcreteScenario, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "value", "low", "high", "step", "choices"])
        for a in scenario.attributes:
            m = a.meta
            writer.writerow([a.name, a.value, m.low, m.high, m.step, len(m.choices) if m.choices is not None else ""])
