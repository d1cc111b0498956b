"""
Deterministic discrete-time traffic harness.

A `Scene` holds everything static about a map (lights, stop lines, solid
markings, speed-limit lookup). `instantiate_scenario` places a concrete
scenario into a `WorldState`; `step_world` advances it by one tick; the
`MisbehaviorDetector` watches consecutive states; `run_scenario` ties the
loop to an agent and returns a `Trace` plus its `Outcome`.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import LineString, Point
from shapely.prepared import prep

from .agents import EGO_LENGTH, EGO_WIDTH, MAX_STEER, WHEELBASE, AgentControl, AgentObservation, DetectedObject
from .errors import AgentFault, EmptyTrace, MissingArtifacts, SpawnCollision
from .geometry import Box, box_clearance, boxes_overlap
from .map_model import RoadNetwork, TopologyGraph, id_sort_key, lane_markings, normalize_angle
from .mutation import COLORS, ActionKind, ConcreteScenario, ObjectKind, ObjectSpec

logger = logging.getLogger(__name__)

DT = 0.05
THROTTLE_ACCEL = 4.0
BRAKE_DECEL = 8.0
STEER_NOISE = 0.002

LIGHT_CYCLE = 30.0
GREEN_END = 12.0
YELLOW_END = 15.0
LIGHT_OFFSET = 15.0

SPEEDING_FACTOR = 1.05
SPEEDING_DWELL = 1.0
STUCK_SPEED = 0.1
GOAL_RADIUS = 2.0
STOP_LINE_LATERAL = 2.0
HEADWAY = 8.0
PERCEPTION_RADIUS = 120.0

SOLID_MARKS = ("solid", "curb")
_COLOR_NAMES = {rgb: name for name, rgb in COLORS.items()}


def light_phase(time: float, offset: float) -> str:
    t = (time + offset) % LIGHT_CYCLE
    if t < GREEN_END:
        return "Green"
    if t < YELLOW_END:
        return "Yellow"
    return "Red"


# ---------------------------------------------------------------- scene


@dataclass(frozen=True)
class StopLine:
    waypoint: int
    x: float
    y: float
    heading: float
    light: Optional[str]


class Scene:
    """Static, shareable view of one map for simulation and detection."""

    def __init__(self, net: RoadNetwork, g: TopologyGraph):
        self.net = net
        self.g = g
        lights = sorted(net.traffic_lights(), key=lambda s: id_sort_key(s.id))
        self.light_offsets: Dict[str, float] = {s.id: LIGHT_OFFSET * (rank % 2) for rank, s in enumerate(lights)}
        self.stop_lines: Dict[int, StopLine] = {}
        for w in g.waypoints:
            if w.junction is not None or not any(g.is_junction(n) for n in g.successors(w.id)):
                continue
            orientation = "+" if w.lane < 0 else "-"
            governing = [s.id for s in lights if s.road == w.road and s.orientation == orientation]
            self.stop_lines[w.id] = StopLine(w.id, w.x, w.y, w.heading, governing[0] if governing else None)
        self.markings = [
            prep(LineString(m.points)) for m in lane_markings(net) if m.kind in SOLID_MARKS and len(m.points) >= 2
        ]
        self._tree = cKDTree(g.positions[:, :2]) if len(g) else None

    def phase(self, light_id: str, time: float) -> str:
        return light_phase(time, self.light_offsets[light_id])

    def phases(self, time: float) -> Tuple[Tuple[str, str], ...]:
        return tuple((lid, self.phase(lid, time)) for lid in self.light_offsets)

    def nearest(self, x: float, y: float) -> int:
        _, idx = self._tree.query([x, y])
        return int(idx)

    def speed_limit(self, x: float, y: float) -> float:
        return self.net.road(self.g.waypoint(self.nearest(x, y)).road).speed_limit


# ---------------------------------------------------------------- world state


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    accel: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def box(self) -> Box:
        return Box(self.x, self.y, self.heading, EGO_LENGTH, EGO_WIDTH)


@dataclass(frozen=True)
class ObjectState:
    index: int
    kind: str
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    height: float
    color: str = "none"
    progress: float = 0.0

    @property
    def entity(self) -> str:
        return f"object.{self.index}"

    def box(self) -> Box:
        return Box(self.x, self.y, self.heading, self.length, self.width)


@dataclass(frozen=True)
class ActivePuddle:
    x: float
    y: float
    radius: float
    friction: float


class _Track:
    """Arc-length parameterised polyline for object motion."""

    def __init__(self, points: np.ndarray):
        self.points = points
        steps = np.hypot(np.diff(points[:, 0]), np.diff(points[:, 1]))
        self.cum = np.concatenate([[0.0], np.cumsum(steps)])
        self.length = float(self.cum[-1])

    def pose(self, station: float) -> Tuple[float, float, float]:
        station = min(max(station, 0.0), self.length)
        i = int(np.searchsorted(self.cum, station, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        f = (station - self.cum[i]) / seg if seg > 0 else 0.0
        a, b = self.points[i], self.points[i + 1]
        return (
            float(a[0] + f * (b[0] - a[0])),
            float(a[1] + f * (b[1] - a[1])),
            math.atan2(b[1] - a[1], b[0] - a[0]),
        )


@dataclass(eq=False)
class ScenarioContext:
    scenario: ConcreteScenario
    scene: Scene
    tracks: Tuple[_Track, ...]
    stations: Tuple[Tuple[Tuple[float, str], ...], ...]
    route_ids: Tuple[int, ...]
    route: LineString
    route_points: Tuple[Tuple[float, float], ...]
    route_cum: np.ndarray
    goal: Tuple[float, float]


@dataclass(frozen=True)
class WorldState:
    tick: int
    time: float
    ego: EgoState
    objects: Tuple[ObjectState, ...] = ()
    lights: Tuple[Tuple[str, str], ...] = ()
    puddles: Tuple[ActivePuddle, ...] = ()
    context: Optional[ScenarioContext] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "time": self.time,
            "ego": asdict(self.ego),
            "objects": [asdict(o) for o in self.objects],
            "lights": [list(p) for p in self.lights],
            "puddles": [asdict(p) for p in self.puddles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            tick=d["tick"],
            time=d["time"],
            ego=EgoState(**d["ego"]),
            objects=tuple(ObjectState(**o) for o in d["objects"]),
            lights=tuple(tuple(p) for p in d["lights"]),
            puddles=tuple(ActivePuddle(**p) for p in d["puddles"]),
        )

    def object_boxes(self) -> List[Tuple[str, Box]]:
        return [(o.entity, o.box()) for o in self.objects]


def _object_track(spec: ObjectSpec, g: TopologyGraph) -> _Track:
    ids = spec.path if spec.kind == ObjectKind.PEDESTRIAN.value else spec.route_from_spawn()
    pts = np.array([[g.waypoint(i).x, g.waypoint(i).y] for i in ids], dtype=float)
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
    return _Track(pts)


def instantiate_scenario(sc: ConcreteScenario, scene: Scene) -> WorldState:
    g = scene.g
    route_ids = tuple(sc.mission.path)
    pts = [(g.waypoint(i).x, g.waypoint(i).y) for i in route_ids]
    start = g.waypoint(sc.mission.start)
    heading = start.heading
    if len(pts) >= 2:
        heading = math.atan2(pts[1][1] - pts[0][1], pts[1][0] - pts[0][0])
    ego = EgoState(start.x, start.y, heading)

    tracks, stations, objects = [], [], []
    for i, spec in enumerate(sc.objects):
        track = _object_track(spec, g)
        ids = spec.path if spec.kind == ObjectKind.PEDESTRIAN.value else spec.route_from_spawn()
        stops = tuple(
            (float(track.cum[k]), scene.stop_lines[w].light)
            for k, w in enumerate(ids)
            if w in scene.stop_lines and scene.stop_lines[w].light is not None
        )
        tracks.append(track)
        stations.append(stops)
        x, y, hdg = track.pose(0.0)
        app = spec.appearance
        objects.append(
            ObjectState(i, spec.kind, x, y, hdg, 0.0, app.length, app.width, app.height, _COLOR_NAMES.get(spec.color, "none"))
        )

    puddles = tuple(
        ActivePuddle(g.waypoint(p.waypoint).x, g.waypoint(p.waypoint).y, p.radius, p.friction) for p in sc.puddles
    )
    boxes = [("ego", ego.box())] + [(o.entity, o.box()) for o in objects]
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            if boxes_overlap(boxes[a][1], boxes[b][1]):
                raise SpawnCollision(f"{boxes[a][0]} and {boxes[b][0]} overlap at spawn")

    route = LineString(pts if len(pts) >= 2 else pts * 2)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff([p[0] for p in pts]), np.diff([p[1] for p in pts])))])
    ctx = ScenarioContext(sc, scene, tuple(tracks), tuple(stations), route_ids, route, tuple(pts), cum, pts[-1])
    return WorldState(0, 0.0, ego, tuple(objects), scene.phases(0.0), puddles, ctx)


# ---------------------------------------------------------------- dynamics


def _friction(world: WorldState) -> float:
    mu = 1.0
    for p in world.puddles:
        if math.hypot(world.ego.x - p.x, world.ego.y - p.y) <= p.radius:
            mu = min(mu, p.friction)
    return mu


def _step_ego(ego: EgoState, control: AgentControl, mu: float, dt: float, noise: float) -> EgoState:
    steer = float(np.clip(control.steer + noise, -1.0, 1.0))
    delta = steer * MAX_STEER
    accel = THROTTLE_ACCEL * control.throttle - BRAKE_DECEL * control.brake * mu
    x = ego.x + ego.speed * math.cos(ego.heading) * dt
    y = ego.y + ego.speed * math.sin(ego.heading) * dt
    heading = normalize_angle(ego.heading + ego.speed / WHEELBASE * math.tan(delta) * dt)
    speed = max(0.0, ego.speed + accel * dt)
    if speed < 1e-9:
        speed = 0.0
    return EgoState(x, y, heading, speed, (speed - ego.speed) / dt, control.throttle, control.brake, control.steer)


def _leader_gap(world: WorldState, me: ObjectState) -> float:
    c, s = math.cos(me.heading), math.sin(me.heading)
    others = [(world.ego.x, world.ego.y, EGO_LENGTH)] + [(o.x, o.y, o.length) for o in world.objects if o.index != me.index]
    gap = math.inf
    for x, y, length in others:
        ahead = (x - me.x) * c + (y - me.y) * s
        lateral = abs(-(x - me.x) * s + (y - me.y) * c)
        if ahead > 0 and lateral < 2.0:
            gap = min(gap, ahead - (me.length + length) / 2.0)
    return gap


def _step_object(world: WorldState, ctx: ScenarioContext, o: ObjectState, time: float, dt: float) -> ObjectState:
    spec = ctx.scenario.objects[o.index]
    track = ctx.tracks[o.index]
    kind = spec.action.kind
    if kind == ActionKind.IMMOBILE.value:
        return o
    if kind == ActionKind.LINEAR.value:
        progress = min(o.progress + spec.action.speed * dt, track.length)
        x, y, hdg = track.pose(progress)
        speed = 0.0 if progress >= track.length else spec.action.speed
        return replace(o, x=x, y=y, heading=hdg, speed=speed, progress=progress)
    if kind == ActionKind.MANEUVER.value:
        total = sum(seg.length for seg in spec.action.segments)
        if o.progress >= total:
            return replace(o, speed=0.0)
        edge, seg = 0.0, spec.action.segments[-1]
        for candidate in spec.action.segments:
            edge += candidate.length
            if o.progress < edge:
                seg = candidate
                break
        v = seg.speed
        yaw_rate = math.radians(seg.turn) / (seg.length / v) if seg.length > 0 else 0.0
        return replace(
            o,
            x=o.x + v * math.cos(o.heading) * dt,
            y=o.y + v * math.sin(o.heading) * dt,
            heading=normalize_angle(o.heading + yaw_rate * dt),
            speed=v,
            progress=o.progress + v * dt,
        )
    # autopilot cruiser
    target = min(ctx.scene.speed_limit(o.x, o.y), math.sqrt(2 * 3.0 * max(_leader_gap(world, o) - HEADWAY, 0.0)))
    for station, light in ctx.stations[o.index]:
        ahead = station - o.progress - o.length / 2.0
        if ahead < 0:
            continue
        if ctx.scene.phase(light, time) != "Green" and ahead <= o.speed ** 2 / (2 * 3.0) + 5.0:
            target = min(target, math.sqrt(2 * 3.0 * max(ahead - 1.0, 0.0)))
        break
    speed = o.speed + float(np.clip(target - o.speed, -BRAKE_DECEL * dt, THROTTLE_ACCEL * dt))
    speed = max(0.0, speed)
    progress = min(o.progress + speed * dt, track.length)
    if progress >= track.length:
        speed = 0.0
    x, y, hdg = track.pose(progress)
    return replace(o, x=x, y=y, heading=hdg, speed=speed, progress=progress)


def step_world(world: WorldState, control: AgentControl, dt: float = DT, noise: float = 0.0) -> WorldState:
    """Advance one tick: ego by the kinematic bicycle model, objects by their action plans."""
    control = control.clamped()
    tick = world.tick + 1
    time = tick * dt
    ego = _step_ego(world.ego, control, _friction(world), dt, noise)
    ctx = world.context
    if ctx is None:
        objects = world.objects
        lights = world.lights
    else:
        objects = tuple(_step_object(world, ctx, o, world.time, dt) for o in world.objects)
        lights = ctx.scene.phases(time)
    return WorldState(tick, time, ego, objects, lights, world.puddles, ctx)


# ---------------------------------------------------------------- detection


@dataclass(frozen=True)
class Misbehavior:
    kind: str
    tick: int
    detail: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tick": self.tick, "detail": dict(self.detail)}


MISBEHAVIOR_KINDS = ("Crash", "RedLight", "Speeding", "LaneInvasion", "Stuck")


@dataclass
class Limits:
    horizon: float = 60.0
    stuck_timeout: float = 300.0
    dt: float = DT


class MisbehaviorDetector:
    """Watches consecutive world states; `update` returns misbehaviors at the new tick."""

    def __init__(self, scene: Scene, limits: Optional[Limits] = None):
        self.scene = scene
        self.limits = limits or Limits()
        self.events: List[dict] = []
        self._over_since: Optional[int] = None
        self._slow_since: Optional[int] = None
        self._stuck_ticks = int(round(self.limits.stuck_timeout / self.limits.dt))
        self._dwell_ticks = int(round(SPEEDING_DWELL / self.limits.dt))

    def start(self, world: WorldState) -> None:
        self._slow_since = world.tick if world.ego.speed < STUCK_SPEED else None

    def _crash(self, world: WorldState) -> List[Misbehavior]:
        ego = world.ego.box()
        return [
            Misbehavior("Crash", world.tick, {"entity": o.entity, "object_kind": o.kind})
            for o in world.objects
            if boxes_overlap(ego, o.box())
        ]

    def _red_light(self, prev: WorldState, world: WorldState) -> List[Misbehavior]:
        found = []
        fp, fn = prev.ego.box().front(), world.ego.box().front()
        for line in self.scene.stop_lines.values():
            c, s = math.cos(line.heading), math.sin(line.heading)
            before = (fp[0] - line.x) * c + (fp[1] - line.y) * s
            after = (fn[0] - line.x) * c + (fn[1] - line.y) * s
            lateral = abs(-(fn[0] - line.x) * s + (fn[1] - line.y) * c)
            if not (before < 0 <= after) or lateral >= STOP_LINE_LATERAL:
                continue
            phase = self.scene.phase(line.light, world.time) if line.light is not None else None
            self.events.append(
                {"tick": world.tick, "type": "LightCrossing", "waypoint": line.waypoint, "light": line.light, "phase": phase}
            )
            if phase == "Red":
                found.append(Misbehavior("RedLight", world.tick, {"light": line.light, "waypoint": line.waypoint}))
        return found

    def _speeding(self, world: WorldState) -> List[Misbehavior]:
        limit = self.scene.speed_limit(world.ego.x, world.ego.y)
        if world.ego.speed <= SPEEDING_FACTOR * limit:
            self._over_since = None
            return []
        if self._over_since is None:
            self._over_since = world.tick
            self.events.append({"tick": world.tick, "type": "SpeedExceeded", "speed": world.ego.speed, "limit": limit})
        if world.tick - self._over_since >= self._dwell_ticks:
            return [Misbehavior("Speeding", world.tick, {"speed": world.ego.speed, "limit": limit})]
        return []

    def _lane_invasion(self, world: WorldState) -> List[Misbehavior]:
        footprint = world.ego.box().polygon()
        for marking in self.scene.markings:
            if marking.intersects(footprint):
                return [Misbehavior("LaneInvasion", world.tick, {"x": world.ego.x, "y": world.ego.y})]
        return []

    def _stuck(self, world: WorldState) -> List[Misbehavior]:
        if world.ego.speed >= STUCK_SPEED:
            self._slow_since = None
            return []
        if self._slow_since is None:
            self._slow_since = world.tick
        if world.tick - self._slow_since >= self._stuck_ticks:
            return [Misbehavior("Stuck", world.tick, {"seconds": (world.tick - self._slow_since) * self.limits.dt})]
        return []

    def update(self, prev: WorldState, world: WorldState) -> List[Misbehavior]:
        found = self._crash(world)
        found += self._red_light(prev, world)
        found += self._speeding(world)
        found += self._lane_invasion(world)
        found += self._stuck(world)
        for m in found:
            self.events.append({"tick": m.tick, "type": m.kind, **m.detail})
        return found


def detect_misbehavior(frames: Sequence[WorldState], scene: Scene, limits: Optional[Limits] = None) -> List[Misbehavior]:
    """Replay a recorded or crafted frame sequence; stops at the first misbehaving tick."""
    if not frames:
        return []
    detector = MisbehaviorDetector(scene, limits)
    detector.start(frames[0])
    for prev, world in zip(frames, frames[1:]):
        found = detector.update(prev, world)
        if found:
            return found
    return []


# ---------------------------------------------------------------- traces


@dataclass
class Outcome:
    status: str
    misbehaviors: Tuple[Misbehavior, ...] = ()
    ticks: int = 0
    score: Optional[float] = None

    @property
    def is_error(self) -> bool:
        return bool(self.misbehaviors)

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(sorted({m.kind for m in self.misbehaviors}))

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "misbehaviors": [m.to_dict() for m in self.misbehaviors],
            "ticks": self.ticks,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Outcome":
        return cls(
            d["status"],
            tuple(Misbehavior(m["kind"], m["tick"], m["detail"]) for m in d["misbehaviors"]),
            d["ticks"],
            d["score"],
        )


@dataclass
class Trace:
    frames: List[WorldState]
    events: List[dict]
    scenario: ConcreteScenario
    rng_seed: int
    agent: str
    agent_version: str
    dt: float = DT
    limits: Dict = field(default_factory=dict)

    def write(self, directory: Path, outcome: Outcome) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "trace.jsonl", "w", encoding="utf-8") as f:
            for frame in self.frames:
                f.write(frame.to_json() + "\n")
        sidecar = {
            "events": self.events,
            "outcome": outcome.to_dict(),
            "rng_seed": self.rng_seed,
            "agent": self.agent,
            "agent_version": self.agent_version,
            "dt": self.dt,
            "limits": self.limits,
            "scenario": self.scenario.digest(),
        }
        (directory / "events.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1), encoding="utf-8")
        (directory / "scenario.json").write_text(self.scenario.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, directory: Path) -> Tuple["Trace", Outcome]:
        directory = Path(directory)
        needed = [directory / name for name in ("trace.jsonl", "events.json", "scenario.json")]
        missing = [p.name for p in needed if not p.exists()]
        if missing:
            raise MissingArtifacts(f"{directory} lacks {', '.join(missing)}")
        with open(needed[0], encoding="utf-8") as f:
            frames = [WorldState.from_dict(json.loads(line)) for line in f if line.strip()]
        sidecar = json.loads(needed[1].read_text(encoding="utf-8"))
        scenario = ConcreteScenario.from_json(needed[2].read_text(encoding="utf-8"))
        trace = cls(
            frames, sidecar["events"], scenario, sidecar["rng_seed"], sidecar["agent"], sidecar["agent_version"],
            sidecar["dt"], sidecar.get("limits", {}),
        )
        return trace, Outcome.from_dict(sidecar["outcome"])


# ---------------------------------------------------------------- loop


def observe(world: WorldState) -> AgentObservation:
    ctx = world.context
    ego = world.ego
    station = ctx.route.project(Point(ego.x, ego.y))
    ahead = [p for p, c in zip(ctx.route_points, ctx.route_cum) if c > station]
    front = station + EGO_LENGTH / 2.0

    junction_distance, light = None, None
    for k, wid in enumerate(ctx.route_ids):
        line = ctx.scene.stop_lines.get(wid)
        if line is None or ctx.route_cum[k] - front < -0.5:
            continue
        junction_distance = float(ctx.route_cum[k] - front)
        light = ctx.scene.phase(line.light, world.time) if line.light is not None else None
        break
    nearest = int(np.argmin([abs(c - station) for c in ctx.route_cum]))
    in_junction = ctx.scene.g.is_junction(ctx.route_ids[nearest])

    objects = tuple(
        DetectedObject(o.entity, o.kind, o.x, o.y, o.heading, o.speed, o.length, o.width, o.height, o.color)
        for o in world.objects
        if math.hypot(o.x - ego.x, o.y - ego.y) <= PERCEPTION_RADIUS
    )
    weather = ctx.scenario.weather
    return AgentObservation(
        tick=world.tick,
        time=world.time,
        x=ego.x,
        y=ego.y,
        heading=ego.heading,
        speed=ego.speed,
        route=tuple(ahead),
        objects=objects,
        light=light,
        junction_distance=junction_distance,
        in_junction=in_junction,
        speed_limit=ctx.scene.speed_limit(ego.x, ego.y),
        fog=weather.fog,
        rain=weather.rain,
    )


def run_scenario(
    sc: ConcreteScenario,
    agent,
    scene: Scene,
    limits: Optional[Limits] = None,
    rng_seed: int = 0,
) -> Tuple[Trace, Outcome]:
    """Drive the agent through the scenario until a misbehavior, completion or the horizon."""
    limits = limits or Limits()
    world = instantiate_scenario(sc, scene)
    detector = MisbehaviorDetector(scene, limits)
    detector.start(world)
    rng = np.random.default_rng(rng_seed)
    frames = [world]
    horizon = int(round(limits.horizon / limits.dt))
    status, found = "HorizonExpired", []
    try:
        try:
            agent.reset()
        except AgentFault:
            raise
        except Exception as e:
            raise AgentFault(f"{agent.name} failed to start: {type(e).__name__}: {e}", 0) from e
        while world.tick < horizon:
            try:
                control = agent.act(observe(world))
            except AgentFault:
                raise
            except Exception as e:
                raise AgentFault(f"{agent.name} raised {type(e).__name__}: {e}", world.tick) from e
            nxt = step_world(world, control, limits.dt, float(rng.normal(0.0, STEER_NOISE)))
            found = detector.update(world, nxt)
            frames.append(nxt)
            world = nxt
            if found:
                status = "Misbehavior"
                break
            if math.hypot(world.ego.x - world.context.goal[0], world.ego.y - world.context.goal[1]) < GOAL_RADIUS:
                status = "Completed"
                break
    finally:
        close = getattr(agent, "close", None)
        if close is not None:
            close()

    trace = Trace(frames, detector.events, sc, rng_seed, agent.name, agent.version, limits.dt, asdict(limits))
    outcome = Outcome(status, tuple(found), world.tick)
    if not found:
        outcome.score = driving_score(trace)
    logger.debug("Scenario %s: %s after %d ticks %s", sc.digest()[:10], status, world.tick, outcome.kinds)
    return trace, outcome


# ---------------------------------------------------------------- scoring


def _episodes(flags: Sequence[bool]) -> int:
    count, inside = 0, False
    for flag in flags:
        if flag and not inside:
            count += 1
        inside = flag
    return count


def steer_reversals(steers: Sequence[float]) -> int:
    count, side = 0, 0
    for s in steers:
        now = 1 if s > 0.1 else -1 if s < -0.1 else 0
        if now and side and now != side:
            count += 1
        if now:
            side = now
    return count


def min_clearance(frames: Sequence[WorldState]) -> float:
    best = math.inf
    for frame in frames:
        ego = frame.ego.box()
        for o in frame.objects:
            best = min(best, box_clearance(ego, o.box()))
    return best


def driving_score(trace: Trace) -> float:
    """100 minus penalties for hard accelerations, hard brakes, steering reversals and close approaches."""
    if not trace.frames:
        raise EmptyTrace("trace has no frames")
    accels = [f.ego.accel for f in trace.frames[1:]]
    penalty = (
        5 * _episodes([a > 3.0 for a in accels])
        + 5 * _episodes([a < -3.0 for a in accels])
        + 2 * steer_reversals([f.ego.steer for f in trace.frames[1:]])
        + 50 * max(0.0, 1.0 - min_clearance(trace.frames) / 5.0)
    )
    return 100.0 - min(100.0, penalty)
