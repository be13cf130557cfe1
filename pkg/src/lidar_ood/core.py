"""Domain types and oriented-box geometry.

Coordinates follow the LiDAR sensor frame: x forward, y left, z up, origin at
the sensor. Box centers are geometric centers (not bottom centers), and yaw is
the heading of the box's length axis measured counter-clockwise from +x.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

# Intersections below this area (m^2) are treated as no overlap.
MIN_INTERSECTION_AREA = 1e-12
MIN_BOX_EXTENT = 0.05


def normalize_angle(angle: float) -> float:
    """Map an angle to the half-open interval (-pi, pi]."""
    a = math.pi - math.fmod(math.pi - float(angle), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


class PointCloud:
    """One LiDAR frame: an ``(N, 4)`` array of ``x, y, z, intensity``.

    The point array is copied and made read-only on construction.
    """

    __slots__ = ("points", "frame_id")

    def __init__(self, points=None, frame_id: str = ""):
        pts = np.zeros((0, 4)) if points is None else np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            pts = pts.reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame_id", str(frame_id))

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud is immutable")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, frame_id={self.frame_id!r})"

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.frame_id)

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.points, other.points]), self.frame_id)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.points[index], self.frame_id)


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # (length, width, height)
    yaw: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size must have three entries")
        if not all(math.isfinite(v) for v in c + s + (float(self.yaw),)):
            raise ValueError("box parameters must be finite")
        if min(s) <= 0.0:
            raise ValueError(f"box dimensions must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def length(self) -> float:
        return self.size[0]

    @property
    def width(self) -> float:
        return self.size[1]

    @property
    def height(self) -> float:
        return self.size[2]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    @property
    def z_range(self) -> tuple:
        half = 0.5 * self.size[2]
        return self.center[2] - half, self.center[2] + half

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape ``(4, 2)``."""
        hl, hw = 0.5 * self.size[0], 0.5 * self.size[1]
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def rotated(self, delta: float) -> "Box3D":
        """Rotate the box about the sensor's vertical axis."""
        c, s = math.cos(delta), math.sin(delta)
        x, y, z = self.center
        return Box3D((c * x - s * y, s * x + c * y, z), self.size, self.yaw + delta)

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


class OodCategory(enum.IntEnum):
    """The eight object categories, split by FG/BG, ID/OOD and detected/missed."""

    DETECTED_FG_ID = 1
    MISSED_FG_ID = 2
    DETECTED_FG_OOD = 3
    MISSED_FG_OOD = 4
    DETECTED_BG_ID = 5
    UNDETECTED_BG_ID = 6
    DETECTED_BG_OOD = 7
    UNDETECTED_BG_OOD = 8

    def in_scope(self) -> bool:
        return self.value in (3, 5, 7)

    @property
    def is_ood(self) -> bool:
        return self.value >= 3


@dataclass(frozen=True)
class LabeledObject:
    box: Box3D
    class_name: str
    is_ood: bool = False
    category: OodCategory = OodCategory.DETECTED_FG_ID

    def __post_init__(self):
        object.__setattr__(self, "category", OodCategory(self.category))
        object.__setattr__(self, "is_ood", bool(self.is_ood))
        if self.is_ood != self.category.is_ood:
            raise ValueError(
                f"is_ood={self.is_ood} inconsistent with category {int(self.category)}")


@dataclass(frozen=True, eq=False)
class Detection:
    """One prediction. ``class_probs`` covers the FG classes followed by background."""

    box: Box3D
    class_probs: np.ndarray
    predicted_class: int
    confidence: float
    anchor_index: Optional[tuple] = None
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.class_probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("class_probs needs at least one FG entry and background")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("class_probs must be a probability vector")
        fg = p[:-1]
        if int(self.predicted_class) != int(np.argmax(fg)):
            raise ValueError("predicted_class must be the argmax over FG entries")
        if abs(float(self.confidence) - float(fg.max())) > 1e-12:
            raise ValueError("confidence must equal the max FG probability")
        p.setflags(write=False)
        object.__setattr__(self, "class_probs", p)
        if self.logits is not None:
            lg = np.array(self.logits, dtype=np.float64)
            lg.setflags(write=False)
            object.__setattr__(self, "logits", lg)
        if self.anchor_index is not None:
            object.__setattr__(self, "anchor_index", tuple(int(v) for v in self.anchor_index))

    @classmethod
    def from_probs(cls, box, class_probs, anchor_index=None, logits=None) -> "Detection":
        p = np.asarray(class_probs, dtype=np.float64)
        k = int(np.argmax(p[:-1]))
        return cls(box, p, k, float(p[k]), anchor_index, logits)

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.box == other.box and np.array_equal(self.class_probs, other.class_probs)
                and self.predicted_class == other.predicted_class
                and self.confidence == other.confidence
                and self.anchor_index == other.anchor_index
                and _opt_equal(self.logits, other.logits))


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class Fov:
    """Axis-aligned field-of-view volume in the sensor frame."""

    x_min: float = 0.0
    x_max: float = 64.0
    y_min: float = -32.0
    y_max: float = 32.0
    z_min: float = -3.0
    z_max: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError(f"empty field of view: {self}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "Fov":
        return cls(*(float(v) for v in values))

    def as_tuple(self) -> tuple:
        return (self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max)

    def contains(self, xyz) -> np.ndarray:
        p = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        return ((p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
                & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max)
                & (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max))

    def azimuth_interval(self) -> tuple:
        """Smallest azimuth interval spanned by the BEV rectangle, seen from the origin."""
        if self.x_min < 0.0 < self.x_max and self.y_min < 0.0 < self.y_max:
            return (-math.pi, math.pi)
        corners = [(x, y) for x in (self.x_min, self.x_max) for y in (self.y_min, self.y_max)]
        angles = [math.atan2(y, x) for x, y in corners]
        if self.x_max <= 0.0 and self.y_min < 0.0 < self.y_max:
            # rectangle straddles the -pi/pi seam behind the sensor
            angles = [a % (2.0 * math.pi) for a in angles]
            return (min(angles), max(angles))
        return (min(angles), max(angles))


# ---------------------------------------------------------------------------
# polygon helpers

def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, output = output, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0.0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb:
        return 0.0
    area = polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))
    return area if area >= MIN_INTERSECTION_AREA else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated bird's-eye-view IoU of the two box footprints."""
    if a == b:
        return 1.0
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection area times vertical overlap."""
    if a == b:
        return 1.0
    lo = max(a.z_range[0], b.z_range[0])
    hi = min(a.z_range[1], b.z_range[1])
    if hi <= lo:
        return 0.0
    inter = bev_intersection_area(a, b) * (hi - lo)
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def points_in_box(pc, box: Box3D, tol: float = 1e-9) -> np.ndarray:
    """Indices of points inside the yaw-rotated cuboid, boundary included."""
    xyz = pc.xyz if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)[:, :3]
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    d = xyz - np.array(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * d[:, 0] + s * d[:, 1]
    local_y = -s * d[:, 0] + c * d[:, 1]
    half = 0.5 * np.array(box.size) + tol
    inside = (np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1]) & (np.abs(d[:, 2]) <= half[2])
    return np.flatnonzero(inside)


def rotate_points(points: np.ndarray, delta: float) -> np.ndarray:
    c, s = math.cos(delta), math.sin(delta)
    out = np.array(points, dtype=np.float64, copy=True)
    x, y = points[:, 0], points[:, 1]
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out


def rotate_about_origin(pc: PointCloud, delta_azimuth: float) -> PointCloud:
    """Rotate every point about the sensor's vertical axis."""
    if delta_azimuth == 0.0:
        return pc
    return pc.with_points(rotate_points(pc.points, delta_azimuth))


def fit_oriented_box(xyz: np.ndarray, min_extent: float = MIN_BOX_EXTENT) -> Box3D:
    """Tight oriented box: minimum-area footprint rectangle plus the z extent.

    The footprint is found by testing every convex-hull edge direction. Collinear
    or tiny inputs fall back to the principal axis of the xy spread.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape[0] == 0:
        raise ValueError("cannot fit a box to zero points")
    xy = xyz[:, :2]
    angles = _candidate_angles(xy)
    best = None
    for theta in angles:
        c, s = math.cos(theta), math.sin(theta)
        u = c * xy[:, 0] + s * xy[:, 1]
        v = -s * xy[:, 0] + c * xy[:, 1]
        ext_u, ext_v = u.max() - u.min(), v.max() - v.min()
        area = ext_u * ext_v
        if best is None or area < best[0] - 1e-12:
            best = (area, theta, u.min(), u.max(), v.min(), v.max())
    _, theta, u0, u1, v0, v1 = best
    lu, lv = u1 - u0, v1 - v0
    cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = c * cu - s * cv, s * cu + c * cv
    if lv > lu:
        lu, lv = lv, lu
        theta += 0.5 * math.pi
    yaw = theta
    # heading of a symmetric footprint is ambiguous; keep it within (-pi/2, pi/2]
    yaw = normalize_angle(yaw)
    if yaw <= -0.5 * math.pi:
        yaw += math.pi
    elif yaw > 0.5 * math.pi:
        yaw -= math.pi
    z0, z1 = xyz[:, 2].min(), xyz[:, 2].max()
    return Box3D((cx, cy, 0.5 * (z0 + z1)),
                 (max(lu, min_extent), max(lv, min_extent), max(z1 - z0, min_extent)),
                 yaw)


def _candidate_angles(xy: np.ndarray) -> list:
    try:
        hull = ConvexHull(xy)
        verts = xy[hull.vertices]
        edges = np.roll(verts, -1, axis=0) - verts
        angles = np.arctan2(edges[:, 1], edges[:, 0]) % (0.5 * math.pi)
        return sorted(set(np.round(angles, 12).tolist()))
    except (QhullError, ValueError):
        if xy.shape[0] < 2:
            return [0.0]
        centered = xy - xy.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        major = vecs[:, -1]
        return [math.atan2(major[1], major[0])]
