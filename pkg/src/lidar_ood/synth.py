"""Synthetic LiDAR scenes and OOD object databases for tests and demos.

Objects are cuboid surface samples standing on a flat ground plane. Nothing
here tries to be realistic; it only has to exercise every pipeline stage.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from .core import Box3D, Fov, LabeledObject, OodCategory, PointCloud
from .featx import DEFAULT_TEMPLATES
from .pcio import Dataset, Frame, OodObject, OodObjectRecord

GROUND_Z = -1.73

# (class name, size, source, category)
DEFAULT_OOD_CLASSES = (
    ("bench", (1.9, 0.7, 0.9), "synthetic", OodCategory.DETECTED_BG_OOD),
    ("sign", (0.5, 0.3, 1.25), "real", OodCategory.DETECTED_BG_ID),
)


def cuboid_surface(box: Box3D, n: int, rng: np.random.Generator,
                   intensity=(0.05, 0.6), include_bottom: bool = False) -> np.ndarray:
    """``n`` points spread over the box faces, area-weighted, with random intensity."""
    l, w, h = box.size
    faces = [(w * h, 0), (w * h, 1), (l * h, 2), (l * h, 3), (l * w, 4)]
    if include_bottom:
        faces.append((l * w, 5))
    areas = np.array([a for a, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    ids = np.array([f for _, f in faces])[which]
    u[ids == 0, 0] = 0.5 * l
    u[ids == 1, 0] = -0.5 * l
    u[ids == 2, 1] = 0.5 * w
    u[ids == 3, 1] = -0.5 * w
    u[ids == 4, 2] = 0.5 * h
    u[ids == 5, 2] = -0.5 * h
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.empty_like(u)
    xyz[:, 0] = c * u[:, 0] - s * u[:, 1] + box.center[0]
    xyz[:, 1] = s * u[:, 0] + c * u[:, 1] + box.center[1]
    xyz[:, 2] = u[:, 2] + box.center[2]
    inten = rng.uniform(*intensity, size=(n, 1))
    return np.hstack([xyz, inten])


def ground_plane(fov: Fov, n: int, rng: np.random.Generator, z: float = GROUND_Z) -> np.ndarray:
    x = rng.uniform(fov.x_min, fov.x_max, n)
    y = rng.uniform(fov.y_min, fov.y_max, n)
    zz = z + rng.normal(0.0, 0.02, n)
    return np.column_stack([x, y, zz, rng.uniform(0.0, 0.3, n)])


def _clear(center, radius, placed, margin) -> bool:
    return all(math.hypot(center[0] - c[0], center[1] - c[1]) > radius + r + margin
               for c, r in placed)


def make_frame(frame_id: str, rng: np.random.Generator, fov: Fov = Fov(),
               n_objects: int = 4, templates=DEFAULT_TEMPLATES, points_per_object=(120, 260),
               n_ground: int = 1500, margin: float = 2.0, x_range=(6.0, 56.0),
               y_range=(-24.0, 24.0)) -> Frame:
    """One frame with ``n_objects`` ID objects drawn from the size templates."""
    placed, labels, chunks = [], [], [ground_plane(fov, n_ground, rng)]
    attempts = 0
    while len(labels) < n_objects and attempts < 500:
        attempts += 1
        name, size = templates[int(rng.integers(len(templates)))]
        jitter = 1.0 + rng.uniform(-0.05, 0.05, 3)
        size = tuple(float(s) for s in np.array(size) * jitter)
        center = (rng.uniform(*x_range), rng.uniform(*y_range), GROUND_Z + 0.5 * size[2])
        radius = 0.5 * math.hypot(size[0], size[1])
        if not _clear(center, radius, placed, margin):
            continue
        box = Box3D(center, size, rng.uniform(-math.pi, math.pi))
        placed.append((center, radius))
        labels.append(LabeledObject(box, name))
        chunks.append(cuboid_surface(box, int(rng.integers(*points_per_object)), rng))
    return Frame(frame_id, PointCloud(np.vstack(chunks), frame_id), labels)


def make_dataset(n_frames: int, seed: int, fov: Fov = Fov(), prefix: str = "f", **kw) -> Dataset:
    rng = np.random.default_rng(seed)
    frames = [make_frame(f"{prefix}{i:04d}", rng, fov, **kw) for i in range(n_frames)]
    return Dataset(frames, tuple(name for name, _ in kw.get("templates", DEFAULT_TEMPLATES)))


def make_ood_object(object_id: str, class_name: str, size, source: str, category,
                    rng: np.random.Generator, n_points: int = 250,
                    range_m=(12.0, 40.0), azimuth=(-0.6, 0.6)) -> OodObject:
    """An OOD snippet stored at a random range and azimuth, as harvested."""
    jitter = 1.0 + rng.uniform(-0.08, 0.08, 3)
    size = tuple(float(s) for s in np.array(size) * jitter)
    rng_m = rng.uniform(*range_m)
    az = rng.uniform(*azimuth)
    center = (rng_m * math.cos(az), rng_m * math.sin(az), GROUND_Z + 0.5 * size[2])
    box = Box3D(center, size, rng.uniform(-math.pi, math.pi))
    pts = cuboid_surface(box, n_points, rng)
    rec = OodObjectRecord(object_id, class_name, source, category, rng_m, az,
                          f"objects/{object_id}.bin")
    return OodObject(rec, PointCloud(pts, object_id))


def make_ood_database(per_class: int, seed: int,
                      classes: Sequence = DEFAULT_OOD_CLASSES, **kw) -> List[OodObject]:
    rng = np.random.default_rng(seed)
    out = []
    for name, size, source, cat in classes:
        for i in range(per_class):
            out.append(make_ood_object(f"{name}_{i:03d}", name, size, source, cat, rng, **kw))
    return out
