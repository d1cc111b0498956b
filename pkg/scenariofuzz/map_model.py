"""
Road network model: an OPENDRIVE-subset parser and the waypoint topology graph.

Supported subset: `road` (planView line + arc), `lanes` (constant width per
lane section), `link`, `junction`, `signal` (trafficLight, speedLimit, stop,
yield).  Everything else is skipped and counted in `RoadNetwork.warnings`.
Right-hand traffic: lanes with negative ids drive towards increasing s.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .errors import (
    DanglingLink,
    EmptyGraph,
    InvalidRoadValue,
    MalformedXml,
    MissingGeometry,
    NotReachable,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SPACING = 5.0
DEFAULT_SPEED_LIMIT = 50.0 / 3.6
SIGNAL_KINDS = ("trafficLight", "speedLimit", "stop", "yield")
_SIGNAL_CODES = {"1000001": "trafficLight", "274": "speedLimit", "206": "stop", "205": "yield"}
_SPEED_UNITS = {"km/h": 1.0 / 3.6, "mph": 0.44704, "m/s": 1.0}
_ROAD_CHILDREN = {"link", "type", "planView", "lanes", "signals"}
_LANE_CHILDREN = {"width", "roadMark", "link"}


def normalize_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def id_sort_key(value: str):
    """Numeric ids sort numerically, everything else lexically after them."""
    try:
        return (0, int(value), "")
    except (TypeError, ValueError):
        return (1, 0, str(value))


@dataclass(frozen=True)
class Geometry:
    s: float
    x: float
    y: float
    hdg: float
    length: float
    curvature: float = 0.0

    def pose_at(self, ds: float) -> Tuple[float, float, float]:
        k = self.curvature
        if abs(k) < 1e-12:
            return (self.x + ds * math.cos(self.hdg), self.y + ds * math.sin(self.hdg), self.hdg)
        hdg = self.hdg + k * ds
        x = self.x + (math.sin(hdg) - math.sin(self.hdg)) / k
        y = self.y - (math.cos(hdg) - math.cos(self.hdg)) / k
        return (x, y, hdg)


@dataclass(frozen=True)
class Lane:
    id: int
    width: float
    type: str = "driving"
    road_mark: str = "none"
    predecessor: Optional[int] = None
    successor: Optional[int] = None


@dataclass(frozen=True)
class LaneSection:
    s: float
    lanes: Tuple[Lane, ...]
    center_mark: str = "none"

    def lane(self, lane_id: int) -> Optional[Lane]:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        return None


@dataclass(frozen=True)
class RoadLink:
    element_type: str
    element_id: str
    contact_point: Optional[str] = None


@dataclass(frozen=True)
class Road:
    id: str
    length: float
    geometry: Tuple[Geometry, ...]
    sections: Tuple[LaneSection, ...]
    junction: Optional[str] = None
    name: str = ""
    speed_limit: float = DEFAULT_SPEED_LIMIT
    predecessor: Optional[RoadLink] = None
    successor: Optional[RoadLink] = None

    def _segment(self, s: float) -> Geometry:
        seg = self.geometry[0]
        for g in self.geometry:
            if g.s <= s + 1e-9:
                seg = g
            else:
                break
        return seg

    def reference_pose(self, s: float) -> Tuple[float, float, float]:
        seg = self._segment(s)
        return seg.pose_at(s - seg.s)

    def curvature_at(self, s: float) -> float:
        return self._segment(s).curvature

    def section_range(self, index: int) -> Tuple[float, float]:
        start = self.sections[index].s
        end = self.sections[index + 1].s if index + 1 < len(self.sections) else self.length
        return start, end

    def lane_offset(self, section: LaneSection, lane_id: int) -> float:
        """Lateral offset t of the lane center, positive to the left."""
        inner = _inner_width(section, lane_id)
        width = section.lane(lane_id).width
        return math.copysign(inner + width / 2.0, lane_id)

    def lane_border(self, section: LaneSection, lane_id: int) -> float:
        """Lateral offset of the lane's outer border."""
        inner = _inner_width(section, lane_id)
        return math.copysign(inner + section.lane(lane_id).width, lane_id)

    def point_at(self, s: float, t: float) -> Tuple[float, float, float]:
        x, y, hdg = self.reference_pose(s)
        return (x - t * math.sin(hdg), y + t * math.cos(hdg), hdg)

    def _pieces(self, s0: float, s1: float) -> List[Tuple[float, float, float]]:
        pieces = []
        for i, g in enumerate(self.geometry):
            g_end = self.geometry[i + 1].s if i + 1 < len(self.geometry) else max(self.length, g.s + g.length)
            a, b = max(s0, g.s), min(s1, g_end)
            if b > a:
                pieces.append((a, b, g.curvature))
        return pieces

    def lane_length(self, s0: float, s1: float, t: float) -> float:
        total = 0.0
        for a, b, k in self._pieces(s0, s1):
            factor = 1.0 - k * t
            if factor <= 0.0:
                raise InvalidRoadValue(f"road {self.id}: lane offset {t} exceeds curve radius")
            total += (b - a) * factor
        return total

    def s_at_lane_distance(self, s0: float, s1: float, t: float, distance: float) -> float:
        remaining = distance
        last = s0
        for a, b, k in self._pieces(s0, s1):
            factor = 1.0 - k * t
            span = (b - a) * factor
            if remaining <= span:
                return a + remaining / factor
            remaining -= span
            last = b
        return last


def _inner_width(section: LaneSection, lane_id: int) -> float:
    step = 1 if lane_id > 0 else -1
    return sum(section.lane(i).width for i in range(step, lane_id, step) if section.lane(i) is not None)


@dataclass(frozen=True)
class Connection:
    id: str
    incoming_road: str
    connecting_road: str
    contact_point: str = "start"
    lane_links: Tuple[Tuple[int, int], ...] = ()


@dataclass(frozen=True)
class Junction:
    id: str
    connections: Tuple[Connection, ...]
    name: str = ""


@dataclass(frozen=True)
class Signal:
    id: str
    kind: str
    road: str
    s: float
    t: float
    x: float
    y: float
    z: float
    orientation: str = "+"
    name: str = ""
    value: Optional[float] = None


@dataclass(frozen=True)
class RoadNetwork:
    name: str
    roads: Tuple[Road, ...]
    junctions: Tuple[Junction, ...] = ()
    signals: Tuple[Signal, ...] = ()
    warnings: int = 0

    @cached_property
    def _roads_by_id(self) -> Dict[str, Road]:
        return {r.id: r for r in self.roads}

    @cached_property
    def _junctions_by_id(self) -> Dict[str, Junction]:
        return {j.id: j for j in self.junctions}

    def road(self, road_id: str) -> Road:
        return self._roads_by_id[road_id]

    def has_road(self, road_id: str) -> bool:
        return road_id in self._roads_by_id

    def junction(self, junction_id: str) -> Junction:
        return self._junctions_by_id[junction_id]

    def has_junction(self, junction_id: str) -> bool:
        return junction_id in self._junctions_by_id

    def traffic_lights(self) -> Tuple[Signal, ...]:
        return tuple(s for s in self.signals if s.kind == "trafficLight")

    def to_json(self) -> str:
        return json.dumps(_network_to_dict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoadNetwork":
        return _network_from_dict(json.loads(text))


def _network_to_dict(net: RoadNetwork) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "name": net.name,
        "roads": [asdict(r) for r in net.roads],
        "junctions": [asdict(j) for j in net.junctions],
        "signals": [asdict(s) for s in net.signals],
        "warnings": net.warnings,
    }


def _link_from(d) -> Optional[RoadLink]:
    return RoadLink(**d) if d else None


def _network_from_dict(data: dict) -> RoadNetwork:
    if data.get("schema") != SCHEMA_VERSION:
        raise MalformedXml(f"unsupported road-network schema {data.get('schema')!r}")
    roads = tuple(
        Road(
            id=r["id"],
            length=r["length"],
            geometry=tuple(Geometry(**g) for g in r["geometry"]),
            sections=tuple(
                LaneSection(s=sec["s"], lanes=tuple(Lane(**ln) for ln in sec["lanes"]), center_mark=sec["center_mark"])
                for sec in r["sections"]
            ),
            junction=r["junction"],
            name=r["name"],
            speed_limit=r["speed_limit"],
            predecessor=_link_from(r["predecessor"]),
            successor=_link_from(r["successor"]),
        )
        for r in data["roads"]
    )
    junctions = tuple(
        Junction(
            id=j["id"],
            name=j["name"],
            connections=tuple(
                Connection(
                    id=c["id"],
                    incoming_road=c["incoming_road"],
                    connecting_road=c["connecting_road"],
                    contact_point=c["contact_point"],
                    lane_links=tuple(tuple(pair) for pair in c["lane_links"]),
                )
                for c in j["connections"]
            ),
        )
        for j in data["junctions"]
    )
    signals = tuple(Signal(**s) for s in data["signals"])
    return RoadNetwork(name=data["name"], roads=roads, junctions=junctions, signals=signals, warnings=data["warnings"])


# ---------------------------------------------------------------- parsing


class _Warnings:
    def __init__(self):
        self.count = 0

    def add(self, message: str, *args) -> None:
        self.count += 1
        logger.debug("Ignored: " + message, *args)


def _float(el: ET.Element, attr: str, default: Optional[float] = None) -> float:
    raw = el.get(attr)
    if raw is None:
        if default is None:
            raise MalformedXml(f"<{el.tag}> is missing attribute '{attr}'")
        return default
    try:
        return float(raw)
    except ValueError as e:
        raise MalformedXml(f"<{el.tag}> attribute {attr}={raw!r} is not a number") from e


def _mark_kind(lane_el: Optional[ET.Element]) -> str:
    if lane_el is None:
        return "none"
    mark = lane_el.find("roadMark")
    if mark is None:
        return "none"
    kind = (mark.get("type") or "none").lower()
    if "solid" in kind or "curb" in kind:
        return "solid"
    if "broken" in kind:
        return "broken"
    return "none"


def _parse_link(el: Optional[ET.Element]) -> Optional[RoadLink]:
    if el is None:
        return None
    element_type = el.get("elementType", "road")
    element_id = el.get("elementId")
    if element_id is None:
        raise MalformedXml(f"<{el.tag}> without elementId")
    return RoadLink(element_type, element_id, el.get("contactPoint"))


def _parse_geometry(road_id: str, plan_view: Optional[ET.Element], warn: _Warnings) -> Tuple[Geometry, ...]:
    if plan_view is None:
        raise MissingGeometry(f"road {road_id} has no planView")
    segments = []
    for g in plan_view.findall("geometry"):
        common = dict(
            s=_float(g, "s", 0.0), x=_float(g, "x"), y=_float(g, "y"), hdg=_float(g, "hdg"), length=_float(g, "length")
        )
        if g.find("line") is not None:
            segments.append(Geometry(**common))
        elif g.find("arc") is not None:
            segments.append(Geometry(curvature=_float(g.find("arc"), "curvature"), **common))
        else:
            warn.add("road %s: unsupported geometry, treated as a line", road_id)
            segments.append(Geometry(**common))
    if not segments:
        raise MissingGeometry(f"road {road_id} has an empty planView")
    return tuple(sorted(segments, key=lambda g: g.s))


def _parse_lane(road_id: str, el: ET.Element, warn: _Warnings) -> Lane:
    lane_id = int(el.get("id"))
    widths = el.findall("width")
    if not widths:
        raise InvalidRoadValue(f"road {road_id} lane {lane_id} has no width")
    if len(widths) > 1:
        warn.add("road %s lane %s: width profile, first record used", road_id, lane_id)
    w = widths[0]
    if any(abs(_float(w, c, 0.0)) > 0.0 for c in ("b", "c", "d")):
        warn.add("road %s lane %s: non-constant width, constant term used", road_id, lane_id)
    width = _float(w, "a")
    if width <= 0.0:
        raise InvalidRoadValue(f"road {road_id} lane {lane_id}: width must be > 0, got {width}")
    for child in el:
        if child.tag not in _LANE_CHILDREN:
            warn.add("road %s lane %s: <%s>", road_id, lane_id, child.tag)
    link = el.find("link")
    pred = succ = None
    if link is not None:
        if link.find("predecessor") is not None:
            pred = int(link.find("predecessor").get("id"))
        if link.find("successor") is not None:
            succ = int(link.find("successor").get("id"))
    return Lane(lane_id, width, el.get("type", "driving"), _mark_kind(el), pred, succ)


def _parse_sections(road_id: str, lanes_el: Optional[ET.Element], warn: _Warnings) -> Tuple[LaneSection, ...]:
    if lanes_el is None:
        raise MissingGeometry(f"road {road_id} has no lanes")
    sections = []
    for child in lanes_el:
        if child.tag != "laneSection":
            warn.add("road %s: <lanes>/<%s>", road_id, child.tag)
            continue
        lanes = []
        for side in ("left", "right"):
            side_el = child.find(side)
            if side_el is not None:
                lanes.extend(_parse_lane(road_id, ln, warn) for ln in side_el.findall("lane"))
        center = child.find("center")
        center_lane = center.find("lane") if center is not None else None
        sections.append(LaneSection(_float(child, "s", 0.0), tuple(sorted(lanes, key=lambda ln: ln.id)), _mark_kind(center_lane)))
    if not sections:
        raise MissingGeometry(f"road {road_id} has no laneSection")
    return tuple(sorted(sections, key=lambda sec: sec.s))


def _speed_limit(road_el: ET.Element) -> float:
    for type_el in road_el.findall("type"):
        speed = type_el.find("speed")
        if speed is not None and speed.get("max") not in (None, "no limit", "undefined"):
            unit = speed.get("unit", "m/s")
            return _float(speed, "max") * _SPEED_UNITS.get(unit, 1.0)
    return DEFAULT_SPEED_LIMIT


def _signal_kind(el: ET.Element) -> Optional[str]:
    for raw in (el.get("type"), el.get("name")):
        if raw in SIGNAL_KINDS:
            return raw
        if raw in _SIGNAL_CODES:
            return _SIGNAL_CODES[raw]
    return None


def parse_opendrive(xml_text: str, name: Optional[str] = None) -> RoadNetwork:
    """Parse an OPENDRIVE document into a validated RoadNetwork."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise MalformedXml(f"not well-formed XML: {e}") from e
    if root.tag != "OpenDRIVE":
        raise MalformedXml(f"root element is <{root.tag}>, expected <OpenDRIVE>")
    warn = _Warnings()
    header = root.find("header")
    net_name = name or (header.get("name") if header is not None else None) or "map"

    roads: List[Road] = []
    signals: List[Signal] = []
    junctions: List[Junction] = []
    for child in root:
        if child.tag == "header":
            continue
        if child.tag == "road":
            road, road_signals = _parse_road(child, warn)
            roads.append(road)
            signals.extend(road_signals)
        elif child.tag == "junction":
            junctions.append(_parse_junction(child))
        else:
            warn.add("<%s>", child.tag)

    net = RoadNetwork(net_name, tuple(roads), tuple(junctions), tuple(signals), warn.count)
    _validate_links(net)
    logger.info(
        "Parsed map %s: %d roads, %d junctions, %d signals (%d ignored elements)",
        net.name, len(net.roads), len(net.junctions), len(net.signals), net.warnings,
    )
    return net


def _parse_road(el: ET.Element, warn: _Warnings) -> Tuple[Road, List[Signal]]:
    road_id = el.get("id")
    if road_id is None:
        raise MalformedXml("<road> without id")
    length = _float(el, "length")
    if length <= 0.0:
        raise InvalidRoadValue(f"road {road_id}: length must be > 0, got {length}")
    for child in el:
        if child.tag not in _ROAD_CHILDREN:
            warn.add("road %s: <%s>", road_id, child.tag)
    link = el.find("link")
    junction = el.get("junction", "-1")
    road = Road(
        id=road_id,
        length=length,
        geometry=_parse_geometry(road_id, el.find("planView"), warn),
        sections=_parse_sections(road_id, el.find("lanes"), warn),
        junction=None if junction in ("-1", "") else junction,
        name=el.get("name", ""),
        speed_limit=_speed_limit(el),
        predecessor=_parse_link(link.find("predecessor")) if link is not None else None,
        successor=_parse_link(link.find("successor")) if link is not None else None,
    )
    signals = []
    signals_el = el.find("signals")
    for sig in signals_el.findall("signal") if signals_el is not None else []:
        kind = _signal_kind(sig)
        if kind is None:
            warn.add("road %s: signal type %s", road_id, sig.get("type"))
            continue
        s, t = _float(sig, "s"), _float(sig, "t", 0.0)
        x, y, _ = road.point_at(s, t)
        value = sig.get("value")
        signals.append(
            Signal(
                id=sig.get("id"), kind=kind, road=road_id, s=s, t=t, x=x, y=y, z=_float(sig, "zOffset", 0.0),
                orientation=sig.get("orientation", "+"), name=sig.get("name", ""),
                value=float(value) if value not in (None, "", "-1") else None,
            )
        )
    return road, signals


def _parse_junction(el: ET.Element) -> Junction:
    connections = []
    for c in el.findall("connection"):
        links = tuple((int(ll.get("from")), int(ll.get("to"))) for ll in c.findall("laneLink"))
        connections.append(
            Connection(c.get("id"), c.get("incomingRoad"), c.get("connectingRoad"), c.get("contactPoint", "start"), links)
        )
    return Junction(el.get("id"), tuple(connections), el.get("name", ""))


def _validate_links(net: RoadNetwork) -> None:
    for road in net.roads:
        for link in (road.predecessor, road.successor):
            if link is None:
                continue
            exists = net.has_road(link.element_id) if link.element_type == "road" else net.has_junction(link.element_id)
            if not exists:
                raise DanglingLink(f"road {road.id} links to missing {link.element_type} {link.element_id}")
        if road.junction is not None and not net.has_junction(road.junction):
            raise DanglingLink(f"road {road.id} belongs to missing junction {road.junction}")
    for junction in net.junctions:
        for c in junction.connections:
            for rid in (c.incoming_road, c.connecting_road):
                if not net.has_road(rid):
                    raise DanglingLink(f"junction {junction.id} connection {c.id} names missing road {rid}")


def load_map(path) -> RoadNetwork:
    path = Path(path)
    return parse_opendrive(path.read_text(encoding="utf-8"), name=path.stem)


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Waypoint:
    id: int
    x: float
    y: float
    z: float
    road: str
    lane: int
    heading: float
    s: float = 0.0
    junction: Optional[str] = None

    @property
    def position(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)


class TopologyGraph:
    """Directed waypoint graph; immutable once built."""

    def __init__(self, waypoints: Sequence[Waypoint], edges: Iterable[Tuple[int, int, float]], spacing: float):
        g = nx.DiGraph()
        for w in waypoints:
            g.add_node(w.id)
        for u, v, length in edges:
            g.add_edge(u, v, length=length)
        self.graph = nx.freeze(g)
        self.spacing = spacing
        self._waypoints = tuple(waypoints)
        self._positions = np.array([w.position for w in self._waypoints], dtype=float).reshape(-1, 3)
        self._positions.setflags(write=False)

    def __len__(self) -> int:
        return len(self._waypoints)

    @property
    def waypoints(self) -> Tuple[Waypoint, ...]:
        return self._waypoints

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    def waypoint(self, wid: int) -> Waypoint:
        return self._waypoints[wid]

    def edges(self) -> List[Tuple[int, int, float]]:
        return [(u, v, d["length"]) for u, v, d in self.graph.edges(data=True)]

    def edge_length(self, u: int, v: int) -> float:
        return self.graph.edges[u, v]["length"]

    def successors(self, wid: int) -> List[int]:
        return sorted(self.graph.successors(wid))

    def predecessors(self, wid: int) -> List[int]:
        return sorted(self.graph.predecessors(wid))

    def is_junction(self, wid: int) -> bool:
        return self._waypoints[wid].junction is not None


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _mapped_lane(lane: Lane, end: str, contact: str, explicit: bool) -> int:
    link = lane.successor if end == "end" else lane.predecessor
    if explicit and link is not None:
        return link
    return lane.id if end != contact else -lane.id


def build_topology(net: RoadNetwork, spacing: float = DEFAULT_SPACING) -> TopologyGraph:
    """Sample every driving lane at `spacing` and connect samples along the driving direction."""
    if spacing <= 0:
        raise ValueError(f"spacing must be > 0, got {spacing}")

    samples: List[Waypoint] = []
    owner_pref: List[Tuple[int, int]] = []
    raw_edges: List[Tuple[int, int, float]] = []
    endpoints: Dict[Tuple[str, int, int, str], int] = {}

    for road in net.roads:
        for si, section in enumerate(road.sections):
            s0, s1 = road.section_range(si)
            for lane in section.lanes:
                if lane.type != "driving":
                    continue
                t = road.lane_offset(section, lane.id)
                length = road.lane_length(s0, s1, t)
                if length <= 1e-9:
                    continue
                n = max(1, math.ceil(length / spacing - 1e-9))
                ids = []
                for k in range(n + 1):
                    s = road.s_at_lane_distance(s0, s1, t, length * k / n)
                    x, y, hdg = road.point_at(s, t)
                    if lane.id > 0:
                        hdg += math.pi
                    ids.append(len(samples))
                    samples.append(Waypoint(len(samples), x, y, 0.0, road.id, lane.id, normalize_angle(hdg), s, road.junction))
                    owner_pref.append((1 if road.junction is not None else 0, len(owner_pref)))
                endpoints[(road.id, si, lane.id, "lo")] = ids[0]
                endpoints[(road.id, si, lane.id, "hi")] = ids[-1]
                order = ids if lane.id < 0 else ids[::-1]
                raw_edges.extend((order[i], order[i + 1], length / n) for i in range(n))

    uf = _UnionFind(len(samples))

    def join(a, b):
        if a in endpoints and b in endpoints:
            uf.union(endpoints[a], endpoints[b])
        else:
            logger.debug("No lane to merge for %s <-> %s", a, b)

    for road in net.roads:
        last = len(road.sections) - 1
        for si in range(last):
            for lane in road.sections[si].lanes:
                target = lane.successor if lane.successor is not None else lane.id
                join((road.id, si, lane.id, "hi"), (road.id, si + 1, target, "lo"))
        for link, end in ((road.predecessor, "start"), (road.successor, "end")):
            if link is None:
                continue
            si = 0 if end == "start" else last
            side = "lo" if end == "start" else "hi"
            if link.element_type == "road":
                other = net.road(link.element_id)
                contact = link.contact_point or ("start" if end == "end" else "end")
                osi = 0 if contact == "start" else len(other.sections) - 1
                oside = "lo" if contact == "start" else "hi"
                for lane in road.sections[si].lanes:
                    target = _mapped_lane(lane, end, contact, explicit=True)
                    join((road.id, si, lane.id, side), (other.id, osi, target, oside))
            else:
                for conn in net.junction(link.element_id).connections:
                    if conn.incoming_road != road.id:
                        continue
                    conn_road = net.road(conn.connecting_road)
                    contact = conn.contact_point or "start"
                    csi = 0 if contact == "start" else len(conn_road.sections) - 1
                    cside = "lo" if contact == "start" else "hi"
                    pairs = conn.lane_links or tuple(
                        (ln.id, _mapped_lane(ln, end, contact, explicit=False)) for ln in road.sections[si].lanes
                    )
                    for from_lane, to_lane in pairs:
                        exits_here = (from_lane < 0) == (end == "end")
                        if exits_here:
                            join((road.id, si, from_lane, side), (conn_road.id, csi, to_lane, cside))

    groups: Dict[int, List[int]] = {}
    for i in range(len(samples)):
        groups.setdefault(uf.find(i), []).append(i)
    owner_of: Dict[int, int] = {root: min(members, key=lambda m: owner_pref[m]) for root, members in groups.items()}
    owners = sorted(owner_of.values())
    final_id = {owner: fid for fid, owner in enumerate(owners)}

    waypoints = []
    for owner in owners:
        w = samples[owner]
        waypoints.append(Waypoint(final_id[owner], w.x, w.y, w.z, w.road, w.lane, w.heading, w.s, w.junction))

    edges: Dict[Tuple[int, int], float] = {}
    for u, v, length in raw_edges:
        fu, fv = final_id[owner_of[uf.find(u)]], final_id[owner_of[uf.find(v)]]
        if fu == fv:
            continue
        edges[(fu, fv)] = min(length, edges.get((fu, fv), math.inf))

    graph = TopologyGraph(waypoints, ((u, v, d) for (u, v), d in sorted(edges.items())), spacing)
    logger.info("Built topology for %s: %d waypoints, %d edges", net.name, len(graph), graph.graph.number_of_edges())
    return graph


def nearest_waypoint(g: TopologyGraph, pos: Sequence[float]) -> Waypoint:
    if len(g) == 0:
        raise EmptyGraph("topology graph has no waypoints")
    p = np.asarray(list(pos) + [0.0] * (3 - len(pos)), dtype=float)[:3]
    d = np.linalg.norm(g.positions - p, axis=1)
    best = np.flatnonzero(d <= d.min() + 1e-9)
    return g.waypoint(int(best.min()))


def shortest_path(g: TopologyGraph, source: Waypoint, target: Waypoint) -> List[Waypoint]:
    """Minimum arc-length route; equal costs resolve to the lexicographically smallest id sequence."""
    start, goal = source.id, target.id
    heap: List[Tuple[float, Tuple[int, ...]]] = [(0.0, (start,))]
    settled = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == goal:
            return [g.waypoint(i) for i in path]
        for nxt in g.successors(node):
            if nxt not in settled:
                heapq.heappush(heap, (dist + g.edge_length(node, nxt), path + (nxt,)))
    raise NotReachable(f"waypoint {goal} is not reachable from {start}")


def path_length(g: TopologyGraph, ids: Sequence[int]) -> float:
    return sum(g.edge_length(a, b) for a, b in zip(ids, ids[1:]))


# ---------------------------------------------------------------- markings


@dataclass(frozen=True)
class LaneMarking:
    road: str
    kind: str
    points: Tuple[Tuple[float, float], ...]


def lane_markings(net: RoadNetwork, step: float = 1.0) -> List[LaneMarking]:
    """Border polylines of non-junction roads with their mark kind."""
    markings = []
    for road in net.roads:
        if road.junction is not None:
            continue
        for si, section in enumerate(road.sections):
            s0, s1 = road.section_range(si)
            n = max(1, math.ceil((s1 - s0) / step))
            stations = [s0 + (s1 - s0) * k / n for k in range(n + 1)]
            borders = [(0.0, section.center_mark)]
            borders += [(road.lane_border(section, ln.id), ln.road_mark) for ln in section.lanes]
            for t, kind in borders:
                pts = tuple((p[0], p[1]) for p in (road.point_at(s, t) for s in stations))
                markings.append(LaneMarking(road.id, kind, pts))
    return markings
