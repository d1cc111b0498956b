"""
Oriented-box helpers: corner generation and separating-axis overlap tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from shapely.geometry import Polygon


@dataclass(frozen=True)
class Box:
    """Oriented box: center, heading (rad), full length and width (m)."""

    x: float
    y: float
    heading: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    @property
    def radius(self) -> float:
        return math.hypot(self.length, self.width) / 2.0

    def front(self) -> Tuple[float, float]:
        return (self.x + math.cos(self.heading) * self.length / 2.0, self.y + math.sin(self.heading) * self.length / 2.0)


def _axes(corners: np.ndarray) -> np.ndarray:
    edges = np.roll(corners, -1, axis=0) - corners
    return np.stack([edges[:, 1], -edges[:, 0]], axis=1)


def polygons_overlap(poly1: np.ndarray, poly2: np.ndarray) -> bool:
    """Separating axis test for two convex polygons given as (n, 2) corner arrays in order."""
    for axis in np.concatenate([_axes(poly1), _axes(poly2)]):
        p1, p2 = poly1 @ axis, poly2 @ axis
        if p1.max() < p2.min() or p2.max() < p1.min():
            return False
    return True


def boxes_overlap(a: Box, b: Box) -> bool:
    if math.hypot(a.x - b.x, a.y - b.y) > a.radius + b.radius:
        return False
    return polygons_overlap(a.corners(), b.corners())


def box_clearance(a: Box, b: Box) -> float:
    return a.polygon().distance(b.polygon())
