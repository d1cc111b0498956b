"""
Scenario seed corpus: crawl a map into seeds around traffic-light clusters and
location clusters of the remaining waypoints, then enrich every seed with its
road type, feasible paths, center and nearby map information.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .errors import MalformedXml, NoMatch
from .map_model import RoadNetwork, TopologyGraph, id_sort_key, normalize_angle, path_length

logger = logging.getLogger(__name__)

CORPUS_SCHEMA = 1


class RoadType(str, Enum):
    STRAIGHT = "StraightRoad"
    CROSS = "CrossRoad"
    T_INTERSECTION = "TIntersection"


class Direction(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"
    STRAIGHT = "Straight"
    UNKNOWN = "Unknown"


TURN_THRESHOLD_DEG = 20.0
STRAIGHT_MAX_LENGTH = 100.0


@dataclass
class CorpusParams:
    spacing: float = 5.0
    light_radius: float = 25.0
    near_radius: float = 40.0
    cluster_radius: float = 30.0
    sign_radius: float = 50.0
    max_hops: int = 60


@dataclass(frozen=True)
class SeedWaypoint:
    id: int
    x: float
    y: float
    z: float
    heading: float
    road: str
    lane: int
    junction: Optional[str] = None


@dataclass(frozen=True)
class SeedLight:
    id: str
    x: float
    y: float
    z: float
    road: str
    orientation: str = "+"


@dataclass(frozen=True)
class SeedPath:
    waypoints: Tuple[int, ...]
    direction: str
    length: float


@dataclass(frozen=True)
class SeedSign:
    id: str
    kind: str
    waypoint: int


@dataclass(frozen=True)
class LaneChange:
    road: str
    lane: int
    allowed: bool


@dataclass(frozen=True)
class SeedExtras:
    signs: Tuple[SeedSign, ...] = ()
    lane_change: Tuple[LaneChange, ...] = ()


@dataclass(frozen=True)
class ScenarioSeed:
    seed_id: str
    map_name: str
    waypoints: Tuple[SeedWaypoint, ...]
    traffic_lights: Tuple[SeedLight, ...]
    road_type: str
    paths: Tuple[SeedPath, ...]
    center: Tuple[float, float, float]
    extras: SeedExtras = field(default_factory=SeedExtras)

    @cached_property
    def _by_id(self) -> Dict[int, SeedWaypoint]:
        return {w.id: w for w in self.waypoints}

    @property
    def waypoint_ids(self) -> Tuple[int, ...]:
        return tuple(w.id for w in self.waypoints)

    @property
    def light_ids(self) -> Tuple[str, ...]:
        return tuple(light.id for light in self.traffic_lights)

    def waypoint(self, wid: int) -> SeedWaypoint:
        return self._by_id[wid]

    def has_waypoint(self, wid: int) -> bool:
        return wid in self._by_id

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSeed":
        return cls(
            seed_id=d["seed_id"],
            map_name=d["map_name"],
            waypoints=tuple(SeedWaypoint(**w) for w in d["waypoints"]),
            traffic_lights=tuple(SeedLight(**t) for t in d["traffic_lights"]),
            road_type=d["road_type"],
            paths=tuple(SeedPath(tuple(p["waypoints"]), p["direction"], p["length"]) for p in d["paths"]),
            center=tuple(d["center"]),
            extras=SeedExtras(
                signs=tuple(SeedSign(**s) for s in d["extras"]["signs"]),
                lane_change=tuple(LaneChange(**c) for c in d["extras"]["lane_change"]),
            ),
        )


@dataclass(frozen=True)
class SeedCorpus:
    map_name: str
    seeds: Tuple[ScenarioSeed, ...]
    spacing: float
    cluster_radius: float
    light_radius: float
    near_radius: float
    build_seconds: float = 0.0

    def seed(self, seed_id: str) -> ScenarioSeed:
        for s in self.seeds:
            if s.seed_id == seed_id:
                return s
        raise NoMatch(f"seed {seed_id} is not in corpus {self.map_name}")

    def to_json(self, with_timing: bool = False) -> str:
        """Canonical corpus JSON; the build duration is only written when asked for."""
        meta = {
            "spacing": self.spacing,
            "cluster_radius": self.cluster_radius,
            "light_radius": self.light_radius,
            "near_radius": self.near_radius,
        }
        if with_timing:
            meta["build_seconds"] = self.build_seconds
        body = {
            "schema": CORPUS_SCHEMA,
            "map_name": self.map_name,
            "meta": meta,
            "seeds": [s.to_dict() for s in self.seeds],
        }
        return json.dumps(body, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SeedCorpus":
        data = json.loads(text)
        if data.get("schema") != CORPUS_SCHEMA:
            raise MalformedXml(f"unsupported corpus schema {data.get('schema')!r}")
        meta = data["meta"]
        return cls(
            map_name=data["map_name"],
            seeds=tuple(ScenarioSeed.from_dict(s) for s in data["seeds"]),
            spacing=meta["spacing"],
            cluster_radius=meta["cluster_radius"],
            light_radius=meta["light_radius"],
            near_radius=meta["near_radius"],
            build_seconds=meta.get("build_seconds", 0.0),
        )


def cluster_points(points: Sequence[Sequence[float]], radius: float) -> List[List[int]]:
    """Single-linkage clusters of point indices, each sorted, ordered by lowest member."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if len(points) == 0:
        return []
    arr = np.asarray(points, dtype=float)
    links = nx.Graph()
    links.add_nodes_from(range(len(arr)))
    links.add_edges_from(cKDTree(arr).query_pairs(radius))
    clusters = [sorted(c) for c in nx.connected_components(links)]
    return sorted(clusters, key=lambda c: c[0])


def _junction_branches(g: TopologyGraph) -> Dict[str, Set[str]]:
    branches: Dict[str, Set[str]] = {}
    for u, v, _ in g.edges():
        wu, wv = g.waypoint(u), g.waypoint(v)
        if wu.junction is not None and wv.junction is None:
            branches.setdefault(wu.junction, set()).add(wv.road)
        elif wv.junction is not None and wu.junction is None:
            branches.setdefault(wv.junction, set()).add(wu.road)
    return branches


def classify_road_type(g: TopologyGraph, nodes: Iterable[int]) -> RoadType:
    """CrossRoad for a 4+ branch junction, TIntersection for 3 branches, else StraightRoad."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("cannot classify an empty waypoint set")
    touched: Set[str] = set()
    for n in nodes:
        for m in [n] + g.successors(n) + g.predecessors(n):
            junction = g.waypoint(m).junction
            if junction is not None:
                touched.add(junction)
    branches = _junction_branches(g)
    degree = max((len(branches.get(j, ())) for j in touched), default=0)
    if degree >= 4:
        return RoadType.CROSS
    if degree == 3:
        return RoadType.T_INTERSECTION
    return RoadType.STRAIGHT


def direction_label(heading_change: float, length: float) -> Direction:
    delta = math.degrees(normalize_angle(heading_change))
    if delta > TURN_THRESHOLD_DEG:
        return Direction.LEFT
    if delta < -TURN_THRESHOLD_DEG:
        return Direction.RIGHT
    if length <= STRAIGHT_MAX_LENGTH:
        return Direction.STRAIGHT
    return Direction.UNKNOWN


def enumerate_paths(g: TopologyGraph, nodes: Iterable[int], max_hops: int = 60) -> List[Tuple[Tuple[int, ...], Direction]]:
    """All simple paths from entry to exit waypoints of the region, with direction labels."""
    if max_hops < 1:
        raise ValueError(f"max_hops must be >= 1, got {max_hops}")
    node_set = sorted(set(nodes))
    sub = g.graph.subgraph(node_set)
    entries = [n for n in node_set if sub.in_degree(n) == 0]
    exits = [n for n in node_set if sub.out_degree(n) == 0]
    found = []
    for source in entries:
        for target in exits:
            if source == target:
                continue
            for path in nx.all_simple_paths(sub, source, target, cutoff=max_hops):
                found.append(tuple(path))
    labelled = []
    for path in sorted(found):
        change = g.waypoint(path[-1]).heading - g.waypoint(path[0]).heading
        labelled.append((path, direction_label(change, path_length(g, path))))
    return labelled


def _lane_change(net: RoadNetwork, road_id: str, lane_id: int, s: float) -> bool:
    road = net.road(road_id)
    section = road.sections[0]
    for sec in road.sections:
        if sec.s <= s + 1e-9:
            section = sec
    lane = section.lane(lane_id)
    step = 1 if lane_id > 0 else -1
    outer, inner = section.lane(lane_id + step), section.lane(lane_id - step) if lane_id - step != 0 else None
    if outer is not None and outer.type == "driving" and lane.road_mark == "broken":
        return True
    return inner is not None and inner.type == "driving" and inner.road_mark == "broken"


def _make_seed(
    seed_id: str,
    net: RoadNetwork,
    g: TopologyGraph,
    nodes: Sequence[int],
    lights: Sequence,
    params: CorpusParams,
) -> ScenarioSeed:
    nodes = sorted(nodes)
    members = tuple(
        SeedWaypoint(w.id, w.x, w.y, w.z, w.heading, w.road, w.lane, w.junction) for w in (g.waypoint(n) for n in nodes)
    )
    positions = g.positions[nodes]
    center = tuple(float(v) for v in positions.mean(axis=0))
    paths = tuple(
        SeedPath(path, direction.value, path_length(g, path))
        for path, direction in enumerate_paths(g, nodes, params.max_hops)
    )

    signs = []
    for sig in sorted(net.signals, key=lambda s: id_sort_key(s.id)):
        if sig.kind == "trafficLight" or math.hypot(sig.x - center[0], sig.y - center[1]) > params.sign_radius:
            continue
        d = np.hypot(positions[:, 0] - sig.x, positions[:, 1] - sig.y)
        signs.append(SeedSign(sig.id, sig.kind, nodes[int(np.argmin(d))]))

    lane_change = []
    seen = set()
    for w in (g.waypoint(n) for n in nodes):
        if w.junction is not None or (w.road, w.lane) in seen:
            continue
        seen.add((w.road, w.lane))
        lane_change.append(LaneChange(w.road, w.lane, _lane_change(net, w.road, w.lane, w.s)))

    return ScenarioSeed(
        seed_id=seed_id,
        map_name=net.name,
        waypoints=members,
        traffic_lights=tuple(SeedLight(t.id, t.x, t.y, t.z, t.road, t.orientation) for t in lights),
        road_type=classify_road_type(g, nodes).value,
        paths=paths,
        center=center,
        extras=SeedExtras(tuple(signs), tuple(sorted(lane_change, key=lambda c: (id_sort_key(c.road), c.lane)))),
    )


def build_corpus(net: RoadNetwork, g: TopologyGraph, params: Optional[CorpusParams] = None) -> SeedCorpus:
    params = params or CorpusParams(spacing=g.spacing)
    started = time.perf_counter()
    positions2d = g.positions[:, :2]
    claimed: Set[int] = set()
    groups: List[Tuple[List[int], list]] = []

    lights = sorted(net.traffic_lights(), key=lambda s: id_sort_key(s.id))
    for cluster in cluster_points([(t.x, t.y, t.z) for t in lights], params.light_radius):
        members = [lights[i] for i in cluster]
        cx = float(np.mean([t.x for t in members]))
        cy = float(np.mean([t.y for t in members]))
        d = np.hypot(positions2d[:, 0] - cx, positions2d[:, 1] - cy)
        near = [int(i) for i in np.flatnonzero(d <= params.near_radius) if int(i) not in claimed]
        if not near:
            logger.warning("Traffic lights %s have no waypoint within %.1f m", [t.id for t in members], params.near_radius)
            continue
        claimed.update(near)
        groups.append((near, members))

    remaining = [w.id for w in g.waypoints if w.id not in claimed]
    for cluster in cluster_points([tuple(g.positions[i]) for i in remaining], params.cluster_radius):
        groups.append(([remaining[i] for i in cluster], []))

    seeds = tuple(
        _make_seed(f"{net.name}-{k:03d}", net, g, nodes, lights_in, params)
        for k, (nodes, lights_in) in enumerate(groups)
    )
    corpus = SeedCorpus(
        map_name=net.name,
        seeds=seeds,
        spacing=g.spacing,
        cluster_radius=params.cluster_radius,
        light_radius=params.light_radius,
        near_radius=params.near_radius,
        build_seconds=round(time.perf_counter() - started, 6),
    )
    logger.info(
        "Corpus %s: %d seeds (%d with traffic lights)",
        net.name, len(seeds), sum(1 for s in seeds if s.traffic_lights),
    )
    return corpus


@dataclass
class SeedFilter:
    map_name: Optional[str] = None
    road_type: Optional[str] = None
    traffic_light: Optional[bool] = None
    sign_kind: Optional[str] = None

    def matches(self, seed: ScenarioSeed) -> bool:
        if self.map_name is not None and seed.map_name != self.map_name:
            return False
        if self.road_type is not None and seed.road_type != RoadType(self.road_type).value:
            return False
        if self.traffic_light is not None and bool(seed.traffic_lights) != self.traffic_light:
            return False
        if self.sign_kind is not None and all(s.kind != self.sign_kind for s in seed.extras.signs):
            return False
        return True


def select_seed(corpus: SeedCorpus, seed_filter: Optional[SeedFilter], rng: np.random.Generator) -> ScenarioSeed:
    """Uniform choice among the seeds matching every provided filter field."""
    if not corpus.seeds:
        raise NoMatch(f"corpus {corpus.map_name} is empty")
    seed_filter = seed_filter or SeedFilter()
    candidates = [s for s in corpus.seeds if seed_filter.matches(s)]
    if not candidates:
        raise NoMatch(f"no seed in {corpus.map_name} matches {seed_filter}")
    return candidates[int(rng.integers(len(candidates)))]


def corpus_path(state_dir: Path, map_name: str) -> Path:
    return Path(state_dir) / "corpus" / f"{map_name}.json"


def save_corpus(corpus: SeedCorpus, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{corpus.map_name}.json"
    path.write_text(corpus.to_json(with_timing=True), encoding="utf-8")
    logger.info("Saved corpus to %s", path)
    return path


def load_corpus(path: Path) -> SeedCorpus:
    return SeedCorpus.from_json(Path(path).read_text(encoding="utf-8"))
