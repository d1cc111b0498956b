"""
Agents under test and the observation/control boundary they talk through.

`basic` tracks its mission with pure pursuit, obeys lights, stops for objects
in its corridor and yields to crossing traffic near junctions. `weak` is the
same driver with perception flaws switched on. `StdioAgent` drives an external
process that speaks one JSON line per tick.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import shlex
import subprocess
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import LineString, Point

from .errors import AgentFault, ConfigError

logger = logging.getLogger(__name__)

EGO_LENGTH = 4.5
EGO_WIDTH = 1.8
WHEELBASE = 2.7
MAX_STEER = math.radians(35.0)


@dataclass(frozen=True)
class DetectedObject:
    id: str
    kind: str
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    height: float
    color: str = "none"


@dataclass(frozen=True)
class AgentObservation:
    tick: int
    time: float
    x: float
    y: float
    heading: float
    speed: float
    route: Tuple[Tuple[float, float], ...]
    objects: Tuple[DetectedObject, ...] = ()
    light: Optional[str] = None
    junction_distance: Optional[float] = None
    in_junction: bool = False
    speed_limit: float = 50.0 / 3.6
    fog: float = 0.0
    rain: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AgentControl:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def clamped(self) -> "AgentControl":
        return AgentControl(
            throttle=float(np.clip(self.throttle, 0.0, 1.0)),
            brake=float(np.clip(self.brake, 0.0, 1.0)),
            steer=float(np.clip(self.steer, -1.0, 1.0)),
        )


@dataclass
class BasicAgent:
    """Pure-pursuit path follower with rule-based speed planning."""

    name: str = "basic"
    version: str = "1.0"
    cruise_speed: float = 8.0
    junction_speed: float = 5.0
    comfort_decel: float = 2.0
    stop_margin: float = 2.0
    detection_range: float = 50.0
    yield_radius: float = 3.0
    yields: bool = True
    height_cutoff: float = 0.0
    blind_colors: Tuple[str, ...] = ()
    weather_scaling: bool = False

    def reset(self) -> None:
        pass

    # -------------------------------------------------------------- perception

    def sensing_range(self, obs: AgentObservation) -> float:
        if not self.weather_scaling:
            return self.detection_range
        return self.detection_range * (1 - 0.6 * obs.fog / 100.0) * (1 - 0.3 * obs.rain / 100.0)

    def perceive(self, obs: AgentObservation) -> List[DetectedObject]:
        reach = self.sensing_range(obs)
        seen = []
        for o in obs.objects:
            if math.hypot(o.x - obs.x, o.y - obs.y) > reach:
                continue
            if o.height < self.height_cutoff or o.color in self.blind_colors:
                continue
            seen.append(o)
        return seen

    # -------------------------------------------------------------- planning

    def _steer(self, obs: AgentObservation, line: LineString) -> float:
        lookahead = max(3.0, 0.4 * obs.speed + 1.5)
        target = line.interpolate(min(lookahead, line.length))
        alpha = math.atan2(target.y - obs.y, target.x - obs.x) - obs.heading
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), lookahead)
        return float(np.clip(delta / MAX_STEER, -1.0, 1.0))

    def _stop_speed(self, gap: float) -> float:
        return math.sqrt(2.0 * self.comfort_decel * max(gap, 0.0))

    def _corridor_limit(self, obs: AgentObservation, line: LineString, objects: Sequence[DetectedObject]) -> float:
        limit = math.inf
        c, s = math.cos(obs.heading), math.sin(obs.heading)
        for o in objects:
            if (o.x - obs.x) * c + (o.y - obs.y) * s <= 0:
                continue
            p = Point(o.x, o.y)
            if line.distance(p) > (o.width + EGO_WIDTH) / 2.0 + 0.5:
                continue
            gap = line.project(p) - (EGO_LENGTH + o.length) / 2.0 - self.stop_margin
            limit = min(limit, self._stop_speed(gap))
        return limit

    def _must_yield(self, obs: AgentObservation, line: LineString, objects: Sequence[DetectedObject]) -> bool:
        near_junction = obs.in_junction or (obs.junction_distance is not None and obs.junction_distance < 15.0)
        if not self.yields or not near_junction:
            return False
        pace = max(obs.speed, 4.0)
        for o in objects:
            if o.speed < 0.5:
                continue
            diff = abs((o.heading - obs.heading + math.pi) % (2 * math.pi) - math.pi)
            if diff < math.radians(30.0):
                continue
            for t in np.arange(0.5, 3.01, 0.5):
                ox, oy = o.x + o.speed * t * math.cos(o.heading), o.y + o.speed * t * math.sin(o.heading)
                ego = line.interpolate(min(pace * t, line.length))
                if math.hypot(ox - ego.x, oy - ego.y) < self.yield_radius:
                    return True
        return False

    def target_speed(self, obs: AgentObservation, line: LineString) -> float:
        target = min(self.cruise_speed, 0.9 * obs.speed_limit)
        if obs.in_junction or (obs.junction_distance is not None and obs.junction_distance < 10.0):
            target = min(target, self.junction_speed)
        if obs.junction_distance is not None and obs.junction_distance > -0.5:
            gap = obs.junction_distance - 1.0
            stopping = obs.speed ** 2 / (2.0 * 3.0)
            if obs.light == "Red" or (obs.light == "Yellow" and gap >= stopping):
                target = min(target, self._stop_speed(gap))
        objects = self.perceive(obs)
        target = min(target, self._corridor_limit(obs, line, objects))
        if self._must_yield(obs, line, objects):
            target = 0.0
        return target

    def act(self, obs: AgentObservation) -> AgentControl:
        points = [(obs.x, obs.y)] + [p for p in obs.route if math.hypot(p[0] - obs.x, p[1] - obs.y) > 1e-6]
        if len(points) < 2:
            return AgentControl(brake=1.0)
        line = LineString(points)
        target = self.target_speed(obs, line)
        steer = self._steer(obs, line)
        if target < 0.05:
            return AgentControl(throttle=0.0, brake=1.0, steer=steer)
        err = target - obs.speed
        if err >= 0:
            return AgentControl(throttle=float(np.clip(0.4 * err + 0.1, 0.0, 0.6)), steer=steer)
        return AgentControl(brake=float(np.clip(-0.3 * err, 0.0, 1.0)), steer=steer)


def weak_agent(height_cutoff: float = 1.0, blind_colors: Sequence[str] = ("red",), weather_scaling: bool = True) -> BasicAgent:
    """`basic` with low-object blindness, color blindspots, weather-shrunk range and no yielding."""
    return BasicAgent(
        name="weak",
        height_cutoff=height_cutoff,
        blind_colors=tuple(blind_colors),
        weather_scaling=weather_scaling,
        yields=False,
    )


class StdioAgent:
    """Out-of-process agent: one observation JSON line out, one control JSON line back."""

    version = "stdio-1"

    def __init__(self, command: str):
        self.command = command
        self.name = f"stdio:{shlex.split(command)[0]}"
        self._proc: Optional[subprocess.Popen] = None

    def reset(self) -> None:
        self.close()
        try:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise AgentFault(f"cannot start agent process {self.command!r}: {e}", 0) from e
        logger.debug("Started agent process %s (pid %s)", self.command, self._proc.pid)

    def act(self, obs: AgentObservation) -> AgentControl:
        if self._proc is None:
            self.reset()
        try:
            self._proc.stdin.write(json.dumps(obs.to_dict()) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as e:
            raise AgentFault(f"agent process {self.command!r} died: {e}", obs.tick) from e
        if not line:
            raise AgentFault(f"agent process {self.command!r} closed its output", obs.tick)
        msg = json.loads(line)
        return AgentControl(float(msg.get("throttle", 0.0)), float(msg.get("brake", 0.0)), float(msg.get("steer", 0.0)))

    def close(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            for pipe in (self._proc.stdin, self._proc.stdout):
                with contextlib.suppress(OSError):
                    pipe.close()
            self._proc = None


def make_agent(name: str, settings: Optional[Dict] = None):
    settings = settings or {}
    if name == "basic":
        return BasicAgent()
    if name == "weak":
        return weak_agent(
            height_cutoff=settings.get("height_cutoff", 1.0),
            blind_colors=settings.get("blind_colors", ["red"]),
            weather_scaling=settings.get("weather_scaling", True),
        )
    if name == "stdio":
        if not settings.get("command"):
            raise ConfigError("agent 'stdio' needs agent.command")
        return StdioAgent(settings["command"])
    raise ConfigError(f"unknown agent {name!r} (expected basic, weak or stdio)")
