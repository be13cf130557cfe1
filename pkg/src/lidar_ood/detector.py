"""Detector interface and a deterministic geometric stub detector.

Any object with a ``detect(cloud) -> DetectorOutput`` method and an
``anchor_grid`` attribute can stand in for the detection model. Implementations
must be deterministic for a fixed configuration and cloud, return detections
sorted by confidence (descending), drop detections below the score threshold,
and be safe to call concurrently on distinct clouds.

Wrapping an external neural detector
------------------------------------
Run the network offline and, per frame, write its final detections (box,
class distribution, logits, anchor cell) and per-layer feature vectors with
:func:`lidar_ood.pcio.write_feature_dump`. The OOD scorers consume
:class:`~lidar_ood.pcio.FeatureSample` lists only, so dump files can replace
live ``detect`` calls for every stage except dataset generation, which needs
the model in the loop.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import softmax

from .core import Detection, Fov, PointCloud, fit_oriented_box
from .errors import DetectorFailure
from .featx import DEFAULT_TEMPLATES, LAYERS, AnchorGrid, FeatureMap

LAYER_STRIDES = {"conv2x": 1, "conv4x": 2, "conv8x": 4, "backbone": 1}
LAYER_CHANNELS = {"conv2x": 8, "conv4x": 8, "conv8x": 8, "backbone": 16}


@dataclass(frozen=True)
class DetectorConfig:
    score_threshold: float = 0.3
    fov: Fov = field(default_factory=Fov)
    T: int = 10
    rng_seed: int = 0
    min_points: int = 30
    cell_size: float = 0.5
    backbone_cell: float = 1.0
    ground_z: float = -1.55
    temperature: float = 0.5
    dirichlet_concentration: float = 50.0
    templates: tuple = DEFAULT_TEMPLATES

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")

    @property
    def classes(self) -> tuple:
        return tuple(name for name, _ in self.templates)


@dataclass(frozen=True, eq=False)
class DetectorOutput:
    detections: tuple
    feature_maps: Dict[str, FeatureMap]
    mc_softmax_samples: Optional[tuple] = None  # per detection, (T, K+1) array

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if self.mc_softmax_samples is not None:
            object.__setattr__(self, "mc_softmax_samples", tuple(self.mc_softmax_samples))

    def __eq__(self, other):
        if not isinstance(other, DetectorOutput):
            return NotImplemented
        if self.detections != other.detections or self.feature_maps.keys() != other.feature_maps.keys():
            return False
        if any(self.feature_maps[k] != other.feature_maps[k] for k in self.feature_maps):
            return False
        a, b = self.mc_softmax_samples, other.mc_softmax_samples
        if a is None or b is None:
            return a is None and b is None
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class Detector(Protocol):
    anchor_grid: AnchorGrid

    def detect(self, pc: PointCloud) -> DetectorOutput: ...


def run_detector(model, pc: PointCloud) -> DetectorOutput:
    """Call ``model.detect`` and surface any failure as :class:`DetectorFailure`."""
    try:
        return model.detect(pc)
    except DetectorFailure:
        raise
    except Exception as exc:  # implementation-defined failures
        raise DetectorFailure(f"{type(exc).__name__}: {exc}") from exc


class StubDetector:
    """Occupancy-grid clustering detector with hand-made features.

    Points above ``ground_z`` inside the FOV are binned into BEV cells, occupied
    cells are merged 8-connectedly, and every cluster with at least
    ``min_points`` points becomes a box fitted to its points. Class logits are
    ``count / 100 - |size - template| / temperature`` against a background
    logit of 0, so the confidence reduces to ``logistic(count / 100)`` when one
    template fits exactly. Feature maps are fixed nonlinear projections of
    per-cell occupancy statistics.
    """

    def __init__(self, cfg: Optional[DetectorConfig] = None):
        self.cfg = cfg or DetectorConfig()
        self.anchor_grid = AnchorGrid.from_fov(self.cfg.fov, self.cfg.backbone_cell,
                                               self.cfg.templates)
        self._template_sizes = np.array([s for _, s in self.cfg.templates], dtype=np.float64)
        self._projections = {layer: _projection(layer, _n_stats(layer), LAYER_CHANNELS[layer])
                             for layer in LAYERS}

    def detect(self, pc: PointCloud) -> DetectorOutput:
        cfg = self.cfg
        pts = pc.points
        keep = cfg.fov.contains(pts[:, :3]) & (pts[:, 2] >= cfg.ground_z) if len(pts) else \
            np.zeros(0, dtype=bool)
        pts = pts[keep]
        maps = self._feature_maps(pts)
        detections = []
        for idx in self._clusters(pts):
            det = self._make_detection(pts[idx])
            if det.confidence >= cfg.score_threshold:
                detections.append(det)
        detections.sort(key=lambda d: (-d.confidence, d.box.center[0], d.box.center[1]))
        mc = tuple(self._mc_samples(i, d) for i, d in enumerate(detections))
        return DetectorOutput(tuple(detections), maps, mc)

    # -- clustering ---------------------------------------------------------

    def _clusters(self, pts: np.ndarray) -> List[np.ndarray]:
        if len(pts) == 0:
            return []
        fov, cell = self.cfg.fov, self.cfg.cell_size
        nx = int(math.ceil((fov.x_max - fov.x_min) / cell))
        ny = int(math.ceil((fov.y_max - fov.y_min) / cell))
        ix = np.clip(((pts[:, 0] - fov.x_min) / cell).astype(np.int64), 0, nx - 1)
        iy = np.clip(((pts[:, 1] - fov.y_min) / cell).astype(np.int64), 0, ny - 1)
        occ = np.zeros((nx, ny), dtype=bool)
        occ[ix, iy] = True
        labels, n = ndimage.label(occ, structure=np.ones((3, 3), dtype=int))
        point_label = labels[ix, iy]
        order = np.argsort(point_label, kind="stable")
        bounds = np.searchsorted(point_label[order], np.arange(1, n + 2))
        out = []
        for k in range(n):
            idx = order[bounds[k]:bounds[k + 1]]
            if len(idx) >= self.cfg.min_points:
                out.append(idx)
        return out

    def _make_detection(self, cluster: np.ndarray) -> Detection:
        box = fit_oriented_box(cluster[:, :3])
        mismatch = np.linalg.norm(self._template_sizes - np.array(box.size), axis=1)
        fg_logits = len(cluster) / 100.0 - mismatch / self.cfg.temperature
        logits = np.append(fg_logits, 0.0)
        probs = softmax(logits)
        probs = probs / probs.sum()
        row, col = self.anchor_grid.cell_of(box.center[0], box.center[1])
        return Detection.from_probs(box, probs, (row, col), logits)

    def _mc_samples(self, i: int, det: Detection) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.rng_seed, i])
        alpha = np.maximum(self.cfg.dirichlet_concentration * det.class_probs, 1e-8)
        draws = rng.dirichlet(alpha, size=self.cfg.T)
        return draws / draws.sum(axis=1, keepdims=True)

    # -- features -----------------------------------------------------------

    def _feature_maps(self, pts: np.ndarray) -> Dict[str, FeatureMap]:
        hb, wb = self.anchor_grid.shape
        stats = {s: _cell_stats(pts, self.cfg.fov.x_min, self.cfg.fov.y_min,
                                self.cfg.backbone_cell * s, hb // s, wb // s, self.cfg.ground_z)
                 for s in (1, 2, 4)}
        maps = {}
        for layer in LAYERS:
            s = LAYER_STRIDES[layer]
            if layer == "backbone":
                up = [np.repeat(np.repeat(stats[k], k, axis=0), k, axis=1) for k in (1, 2, 4)]
                x = np.concatenate(up, axis=2)
            else:
                x = stats[s]
            w, b = self._projections[layer]
            data = np.tanh(x @ w + b).astype(np.float32)
            maps[layer] = FeatureMap(layer, data, s)
        return maps


def _n_stats(layer: str) -> int:
    return 12 if layer == "backbone" else 4


def _projection(layer: str, n_in: int, n_out: int):
    rng = np.random.default_rng(zlib.crc32(layer.encode()))
    w = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))
    b = rng.normal(0.0, 0.1, size=n_out)
    return w, b


def _cell_stats(pts, x0, y0, cell, h, w, ground_z) -> np.ndarray:
    """Per-cell (log count, mean height, max height, mean intensity), heights above ground."""
    out = np.zeros((h, w, 4))
    if len(pts) == 0:
        return out
    r = np.clip(((pts[:, 0] - x0) / cell).astype(np.int64), 0, h - 1)
    c = np.clip(((pts[:, 1] - y0) / cell).astype(np.int64), 0, w - 1)
    flat = r * w + c
    z = pts[:, 2] - ground_z
    count = np.bincount(flat, minlength=h * w).astype(np.float64)
    zsum = np.bincount(flat, weights=z, minlength=h * w)
    isum = np.bincount(flat, weights=pts[:, 3], minlength=h * w)
    zmax = np.zeros(h * w)
    np.maximum.at(zmax, flat, z)
    occupied = count > 0
    mean_z = np.divide(zsum, count, out=np.zeros_like(zsum), where=occupied)
    mean_i = np.divide(isum, count, out=np.zeros_like(isum), where=occupied)
    out[..., 0] = np.log1p(count).reshape(h, w) / 3.0
    out[..., 1] = mean_z.reshape(h, w)
    out[..., 2] = zmax.reshape(h, w)
    out[..., 3] = mean_i.reshape(h, w)
    return out


def stub_detect(pc: PointCloud, cfg: Optional[DetectorConfig] = None) -> DetectorOutput:
    return StubDetector(cfg).detect(pc)
