"""Shared synthetic fixtures for unit and acceptance tests."""

import math

import numpy as np

from lidar_ood.core import Box3D, LabeledObject, OodCategory
from lidar_ood.metrics import DetectionRecord, ScoredDetection

CLASSES = ("Car", "Pedestrian", "Cyclist")
SIZES = {"Car": (3.9, 1.6, 1.56), "Pedestrian": (0.8, 0.6, 1.73), "Cyclist": (1.76, 0.6, 1.73)}


def sweep_fixture(rng, n_frames=5, n_dets=30):
    """Frames with ID and OOD ground truth plus ``n_dets`` noisy predictions.

    Returns ``(scored detections, gt by frame, plain tuples for the oracle)``.
    """
    gt = {}
    for f in range(n_frames):
        objs = []
        for k in range(4):
            c = CLASSES[int(rng.integers(3))]
            box = Box3D((8.0 + 10 * k, rng.uniform(-10, 10), -1.0), SIZES[c], rng.uniform(-3, 3))
            if k == 3:
                objs.append(LabeledObject(box, "thing", True, OodCategory.DETECTED_BG_OOD))
            else:
                objs.append(LabeledObject(box, c))
        gt[f"f{f}"] = objs
    dets, plain = [], []
    for i in range(n_dets):
        fid = f"f{int(rng.integers(n_frames))}"
        roll = rng.uniform()
        if roll < 0.75:
            o = gt[fid][int(rng.integers(4))]
            c = o.class_name if not o.is_ood else CLASSES[int(rng.integers(3))]
            j = rng.normal(0, 0.15, 2)
            box = Box3D((o.box.center[0] + j[0], o.box.center[1] + j[1], -1.0),
                        o.box.size, o.box.yaw + rng.normal(0, 0.05))
            if rng.uniform() < 0.2:
                c = CLASSES[int(rng.integers(3))]
        else:
            c = CLASSES[int(rng.integers(3))]
            box = Box3D((rng.uniform(5, 50), rng.uniform(-20, 20), -1.0), SIZES[c], 0.0)
        conf = float(np.round(rng.uniform(0.3, 1.0), 3))
        score = float(np.round(rng.uniform(0, 1), 2))
        dets.append(ScoredDetection(fid, DetectionRecord(box, CLASSES.index(c), conf), score))
        plain.append((fid, box, c, conf, score))
    return dets, gt, plain


VEHICLE_MODELS = ((4.2, 1.8, 1.5), (3.9, 1.6, 1.56), (4.6, 1.9, 1.45), (4.0, 1.7, 1.7))
EXCAVATORS = ((9.5, 3.0, 3.2), (10.0, 3.2, 3.4), (9.8, 3.1, 3.3))


def planted_vehicles():
    """100 inliers (25 identical boxes per vehicle model) followed by 3 excavators.

    Returns ``(boxes, planted outlier indices)``.
    """
    boxes = [Box3D((5.0 * i, 0.0, -1.0), VEHICLE_MODELS[i % 4], 0.0) for i in range(100)]
    boxes += [Box3D((0.0, 10.0 * k, -1.0), s, 0.0) for k, s in enumerate(EXCAVATORS)]
    return boxes, [100, 101, 102]
