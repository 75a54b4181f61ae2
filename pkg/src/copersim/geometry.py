"""Oriented BEV box geometry: corners, exact rotated IoU, greedy NMS.

Intersection areas come from Sutherland-Hodgman clipping of one rectangle
against the other, so the IoU is exact up to float rounding rather than a
grid or sampling approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ObjectBox", "normalize_yaw", "box_corners", "rotated_iou", "greedy_nms"]


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True)
class ObjectBox:
    """Oriented rectangle in the BEV plane; length runs along the heading."""

    center_x: float
    center_y: float
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError(f"box dims must be positive, got length={self.length}, width={self.width}")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]; use normalize_yaw")

    @property
    def area(self) -> float:
        return self.length * self.width

    def translated(self, dx: float, dy: float) -> "ObjectBox":
        return ObjectBox(self.center_x + dx, self.center_y + dy, self.length, self.width, self.yaw)

    def rotated_about(self, ox: float, oy: float, angle: float) -> "ObjectBox":
        c, s = math.cos(angle), math.sin(angle)
        rx = ox + c * (self.center_x - ox) - s * (self.center_y - oy)
        ry = oy + s * (self.center_x - ox) + c * (self.center_y - oy)
        return ObjectBox(rx, ry, self.length, self.width, normalize_yaw(self.yaw + angle))


def box_corners(box: ObjectBox) -> np.ndarray:
    """Corner coordinates (4,2) in counter-clockwise order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.length, 0.5 * box.width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center_x, box.center_y])


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of ``poly`` on or left of the directed edge a->b."""
    if len(poly) == 0:
        return poly
    edge = b - a
    side = np.cross(edge, poly - a)
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        p, q = poly[i], poly[j]
        inside_p, inside_q = side[i] >= 0.0, side[j] >= 0.0
        if inside_p:
            out.append(p)
        if inside_p != inside_q:
            d = poly[j] - poly[i]
            denom = np.cross(edge, d)
            # denom == 0 only when the segment is parallel and the sides
            # differ, which cannot happen; guard anyway for degenerate input
            t = np.cross(edge, a - p) / denom if denom != 0.0 else 0.0
            out.append(p + np.clip(t, 0.0, 1.0) * d)
    return np.asarray(out) if out else np.empty((0, 2))


def _intersection_area(ca: np.ndarray, cb: np.ndarray) -> float:
    poly = ca
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def rotated_iou(a: ObjectBox, b: ObjectBox) -> float:
    """Exact intersection-over-union of two oriented boxes, in [0, 1]."""
    if a.area <= 0.0 or b.area <= 0.0:
        raise ValueError("rotated_iou: degenerate zero-area box")
    # quick reject: circumscribed circles do not touch
    dx, dy = a.center_x - b.center_x, a.center_y - b.center_y
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    inter = _intersection_area(box_corners(a), box_corners(b))
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def greedy_nms(boxes: list[ObjectBox], confidences: list[float], iou_thresh: float) -> list[int]:
    """Indices kept by greedy suppression in descending confidence order.

    Ties in confidence resolve by original index, which keeps the result
    deterministic for equal scores.  A pair is suppressed when its IoU is
    greater than or equal to ``iou_thresh``.
    """
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-confidences[i], i))
    if n <= 1:
        return order
    # exact IoU is only evaluated where circumscribed circles touch
    centers = np.array([[b.center_x, b.center_y] for b in boxes])
    radii = np.array([0.5 * math.hypot(b.length, b.width) for b in boxes])
    dx = centers[:, 0:1] - centers[None, :, 0]
    dy = centers[:, 1:2] - centers[None, :, 1]
    touch = dx * dx + dy * dy <= (radii[:, None] + radii[None, :]) ** 2
    np.fill_diagonal(touch, False)
    rows, cols = np.nonzero(touch)
    bounds = np.searchsorted(rows, np.arange(n + 1))
    neighbors = [set(cols[bounds[i] : bounds[i + 1]].tolist()) for i in range(n)]

    kept: list[int] = []
    kept_set: set[int] = set()
    for i in order:
        cands = neighbors[i] & kept_set
        if any(rotated_iou(boxes[i], boxes[j]) >= iou_thresh for j in cands):
            continue
        kept.append(i)
        kept_set.add(i)
    return kept
