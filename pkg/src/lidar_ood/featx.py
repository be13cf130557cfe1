"""Per-object feature vectors from detector feature maps.

Training samples come from anchors assigned positive to ground-truth objects;
test samples come from the anchor each final prediction was decoded from.
Maps coarser than the backbone grid are read through nearest-neighbour
upsampling, so ``map[row // s, col // s]`` at stride ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import Box3D, Fov, LabeledObject, bev_iou
from .errors import MissingAnchorIndex, MissingLayer, NonIntegerScale
from .pcio import FeatureSample

LAYERS = ("conv2x", "conv4x", "conv8x", "backbone")
LOGIT_LAYER = "logits"

DEFAULT_TEMPLATES = (
    ("Car", (3.9, 1.6, 1.56)),
    ("Pedestrian", (0.8, 0.6, 1.73)),
    ("Cyclist", (1.76, 0.6, 1.73)),
)
DEFAULT_POS_IOU = {"Car": 0.6, "Pedestrian": 0.5, "Cyclist": 0.5}
ANCHOR_YAWS = (0.0, 0.5 * math.pi)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    layer: str
    data: np.ndarray  # (H, W, C)
    stride_vs_backbone: int = 1

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError("feature map data must be H x W x C")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")
        if self.layer == "backbone" and self.stride_vs_backbone != 1:
            raise ValueError("backbone layer must have stride 1")
        if int(self.stride_vs_backbone) < 1:
            raise ValueError("stride must be a positive integer")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (self.layer == other.layer and self.stride_vs_backbone == other.stride_vs_backbone
                and self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class AnchorTemplate:
    class_name: str
    size: tuple
    yaw: float
    z: float = -1.0


@dataclass(frozen=True)
class AnchorGrid:
    """Backbone grid geometry plus the anchor templates replicated at every cell.

    Row index follows x, column index follows y.
    """

    shape: tuple  # (H_b, W_b)
    cell_size: float
    origin: tuple  # (x_min, y_min)
    templates: tuple
    classes: tuple

    def __post_init__(self):
        if not self.templates:
            raise ValueError("anchor grid needs at least one template")

    @classmethod
    def from_fov(cls, fov: Fov, cell_size: float = 1.0, templates=DEFAULT_TEMPLATES,
                 pad_to: int = 4, ground_z: float = -1.73) -> "AnchorGrid":
        h = int(math.ceil((fov.x_max - fov.x_min) / cell_size - 1e-9))
        w = int(math.ceil((fov.y_max - fov.y_min) / cell_size - 1e-9))
        h = -(-h // pad_to) * pad_to
        w = -(-w // pad_to) * pad_to
        tmpl = tuple(AnchorTemplate(name, tuple(size), yaw, ground_z + 0.5 * size[2])
                     for name, size in templates for yaw in ANCHOR_YAWS)
        classes = tuple(name for name, _ in templates)
        return cls((h, w), float(cell_size), (fov.x_min, fov.y_min), tmpl, classes)

    @property
    def n_anchors(self) -> int:
        return len(self.templates)

    def cell_center(self, row: int, col: int) -> tuple:
        return (self.origin[0] + (row + 0.5) * self.cell_size,
                self.origin[1] + (col + 0.5) * self.cell_size)

    def cell_of(self, x: float, y: float) -> tuple:
        r = int(math.floor((x - self.origin[0]) / self.cell_size))
        c = int(math.floor((y - self.origin[1]) / self.cell_size))
        return (min(max(r, 0), self.shape[0] - 1), min(max(c, 0), self.shape[1] - 1))

    def anchor_box(self, row: int, col: int, k: int) -> Box3D:
        t = self.templates[k]
        cx, cy = self.cell_center(row, col)
        return Box3D((cx, cy, t.z), t.size, t.yaw)

    def class_index(self, name: str) -> int:
        return self.classes.index(name)


@dataclass(frozen=True, order=True)
class PositiveAnchor:
    row: int
    col: int
    anchor: int
    class_name: str
    gt_index: int


def assign_positive_anchors(gt: Sequence[LabeledObject], grid: AnchorGrid,
                            thresholds: Optional[Dict[str, float]] = None) -> List[PositiveAnchor]:
    """Anchors whose BEV IoU with a same-class ID object reaches the class threshold.

    An anchor claimed by several objects goes to the one with the highest IoU.
    An object that reaches no threshold gets its best-IoU anchor forced positive.
    """
    thresholds = DEFAULT_POS_IOU if thresholds is None else thresholds
    best: Dict[tuple, tuple] = {}  # (row, col, k) -> (iou, gt_key, gt_index)
    forced = []
    for gi, obj in enumerate(gt):
        if obj.is_ood or obj.class_name not in grid.classes:
            continue
        thr = thresholds.get(obj.class_name, 0.5)
        key = (obj.box.center, obj.box.size, obj.box.yaw)
        top = None
        for (r, c, k), iou in _candidate_ious(obj, grid):
            if top is None or iou > top[0]:
                top = (iou, (r, c, k))
            if iou >= thr:
                prev = best.get((r, c, k))
                # ties go to the lexicographically smaller box so order does not matter
                if prev is None or iou > prev[0] or (iou == prev[0] and key < prev[1]):
                    best[(r, c, k)] = (iou, key, gi)
        if top is not None and top[0] < thr:
            forced.append((top[1], gi))
    out = {}
    for (r, c, k), (_, _, gi) in best.items():
        out[(r, c, k)] = PositiveAnchor(r, c, k, gt[gi].class_name, gi)
    for (r, c, k), gi in forced:
        out.setdefault((r, c, k), PositiveAnchor(r, c, k, gt[gi].class_name, gi))
    return sorted(out.values())


def _candidate_ious(obj: LabeledObject, grid: AnchorGrid):
    """Yield ((row, col, k), iou) over same-class anchors near the object."""
    ks = [k for k, t in enumerate(grid.templates) if t.class_name == obj.class_name]
    if not ks:
        return
    reach = 0.5 * math.hypot(*obj.box.size[:2]) + max(
        0.5 * math.hypot(*grid.templates[k].size[:2]) for k in ks) + grid.cell_size
    cx, cy = obj.box.center[:2]
    r0, c0 = grid.cell_of(cx - reach, cy - reach)
    r1, c1 = grid.cell_of(cx + reach, cy + reach)
    found = False
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            for k in ks:
                iou = bev_iou(grid.anchor_box(r, c, k), obj.box)
                found = True
                yield (r, c, k), iou
    if not found:
        r, c = grid.cell_of(cx, cy)
        yield (r, c, ks[0]), 0.0


def upsample_nearest(fm: FeatureMap, target) -> FeatureMap:
    """Nearest-neighbour upsampling of ``fm`` onto a ``(H_b, W_b)`` grid."""
    th, tw = int(target[0]), int(target[1])
    if th % fm.height or tw % fm.width:
        raise NonIntegerScale(f"{fm.height}x{fm.width} does not divide {th}x{tw}")
    sy, sx = th // fm.height, tw // fm.width
    if sy != sx:
        raise NonIntegerScale(f"anisotropic scale {sy}x{sx}")
    if sy == 1 or fm.layer == "backbone":
        return fm
    data = np.repeat(np.repeat(fm.data, sy, axis=0), sx, axis=1)
    return FeatureMap(fm.layer, data, 1)


def _read_cell(fm: FeatureMap, row: int, col: int) -> np.ndarray:
    s = fm.stride_vs_backbone
    return fm.data[row // s, col // s]


def _layer(out, layer: str) -> FeatureMap:
    try:
        return out.feature_maps[layer]
    except KeyError:
        raise MissingLayer(f"layer {layer!r} not in detector output "
                           f"(have {sorted(out.feature_maps)})") from None


def extract_training_samples(out, gt: Sequence[LabeledObject], grid: AnchorGrid, layer: str,
                             frame_id: str = "",
                             thresholds: Optional[Dict[str, float]] = None) -> List[FeatureSample]:
    """One sample per positive anchor; anchors of one object are not aggregated."""
    fm = _layer(out, layer)
    return [FeatureSample(_read_cell(fm, p.row, p.col), grid.class_index(p.class_name), False,
                          "gt_anchor", frame_id, layer)
            for p in assign_positive_anchors(gt, grid, thresholds)]


def extract_test_samples(out, layer: str, frame_id: str = "",
                         is_ood: Optional[Sequence[bool]] = None) -> List[FeatureSample]:
    """One sample per final detection, read at the detection's anchor cell."""
    fm = _layer(out, layer)
    samples = []
    for i, det in enumerate(out.detections):
        if det.anchor_index is None:
            raise MissingAnchorIndex(f"detection {i} carries no anchor index")
        r, c = det.anchor_index[:2]
        flag = bool(is_ood[i]) if is_ood is not None else False
        samples.append(FeatureSample(_read_cell(fm, r, c), det.predicted_class, flag,
                                     "prediction", frame_id, layer))
    return samples


def logit_vector(det) -> np.ndarray:
    """FG logits of a detection (the background logit is a constant reference)."""
    if det.logits is None:
        raise MissingLayer("detection carries no logits")
    return det.logits[:-1]


def extract_logit_samples(out, frame_id: str = "", gt: Optional[Sequence[LabeledObject]] = None,
                          classes: Sequence[str] = (), match_iou: float = 0.5,
                          is_ood: Optional[Sequence[bool]] = None) -> List[FeatureSample]:
    """Logit-space samples.

    With ``gt`` given (training), only detections matching an ID object of the
    same class by BEV IoU >= ``match_iou`` are kept and labelled with that
    object's class; otherwise one sample per detection.
    """
    samples = []
    for i, det in enumerate(out.detections):
        vec = logit_vector(det)
        if gt is None:
            flag = bool(is_ood[i]) if is_ood is not None else False
            samples.append(FeatureSample(vec, det.predicted_class, flag, "prediction",
                                         frame_id, LOGIT_LAYER))
            continue
        for obj in gt:
            if obj.is_ood or obj.class_name not in classes:
                continue
            if bev_iou(det.box, obj.box) >= match_iou:
                samples.append(FeatureSample(vec, list(classes).index(obj.class_name), False,
                                             "gt_anchor", frame_id, LOGIT_LAYER))
                break
    return samples
