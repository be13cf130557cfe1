"""OOD scene generation by inserting database objects into ID frames.

For every OOD class the generator walks the frames in order. Per frame it
runs the detector once, then draws (object, azimuth) trials until one is
accepted or ``gamma_max`` trials are used up. A trial is accepted when the
rotated object

* overlaps no ground-truth box and no current prediction (BEV IoU > 1e-9 fails),
* has its box center inside the FOV,
* is detected in the merged frame with confidence >= ``tau``
  (BEV IoU >= 0.3 with the proposed box, any FG class), and
* leaves every original prediction matched (BEV IoU >= 0.5, same class).

The object keeps its range to the sensor; only its azimuth changes. Points are
merged by concatenation, without occlusion shadows.
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import Box3D, Fov, LabeledObject, PointCloud, bev_iou, fit_oriented_box, normalize_angle, rotate_points
from .detector import run_detector
from .errors import DegenerateIntensity, EmptyDatabaseClass, EmptyTarget
from .pcio import Dataset, Frame, OodObject
from .seeding import derive_rng

OVERLAP_EPS = 1e-9
INTENSITY_MODES = ("by_source", "constant", "log_moments", "none")


@dataclass(frozen=True)
class InjectConfig:
    gamma_max: int = 100
    zeta_max: int = 300
    tau: float = 0.3
    rng_seed: int = 0
    fov: Fov = field(default_factory=Fov)
    match_iou: float = 0.3
    preserve_iou: float = 0.5
    # "by_source": synthetic objects get the constant median, real ones are kept;
    # "constant" / "log_moments" apply one transform to all; "none" keeps all.
    intensity: str = "by_source"

    def __post_init__(self):
        if self.intensity not in INTENSITY_MODES:
            raise ValueError(f"intensity must be one of {INTENSITY_MODES}")
        if self.gamma_max < 1:
            raise ValueError("gamma_max must be at least 1")
        if self.zeta_max < 0:
            raise ValueError("zeta_max must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


# ---------------------------------------------------------------------------
# intensity adaptation

def match_intensity_constant(obj: PointCloud, target: PointCloud) -> PointCloud:
    """Set every object intensity to the median intensity of ``target``."""
    if len(target) == 0:
        raise EmptyTarget("target cloud has no points")
    pts = np.array(obj.points)
    pts[:, 3] = np.median(target.intensity)
    return obj.with_points(pts)


def match_intensity_log_moments(obj: PointCloud, target: PointCloud, eps: float = 1e-2) -> PointCloud:
    """Squash intensities with tanh, then match mean and variance of ``log(i + eps)``.

    The result is clamped to [0, 1]; moments match exactly only when no value
    needed clamping.
    """
    if len(target) == 0:
        raise EmptyTarget("target cloud has no points")
    if len(obj) == 0:
        return obj
    squashed = np.tanh(obj.intensity)
    u = np.log(squashed + eps)
    sd = u.std()
    if not sd > 0.0:
        raise DegenerateIntensity("object intensities have zero variance after tanh")
    v = np.log(target.intensity + eps)
    u2 = (u - u.mean()) * (v.std() / sd) + v.mean()
    pts = np.array(obj.points)
    pts[:, 3] = np.clip(np.exp(u2) - eps, 0.0, 1.0)
    return obj.with_points(pts)


def adapt_intensity(obj: OodObject, target: PointCloud, mode: str) -> OodObject:
    """The object with its intensities matched to ``target`` according to ``mode``."""
    if mode == "by_source":
        mode = "constant" if obj.record.source == "synthetic" else "none"
    if mode == "none":
        return obj
    fn = match_intensity_constant if mode == "constant" else match_intensity_log_moments
    return OodObject(obj.record, fn(obj.cloud, target))


# ---------------------------------------------------------------------------
# placement and trials

@dataclass(frozen=True, eq=False)
class Placement:
    cloud: PointCloud  # frame points followed by object points
    box: Box3D
    object_indices: np.ndarray


def object_box(obj: OodObject) -> Box3D:
    return fit_oriented_box(obj.cloud.xyz)


def place_object(obj: OodObject, frame: PointCloud, azimuth: float) -> Placement:
    """Rotate the object from its recorded azimuth to ``azimuth`` and append it."""
    delta = normalize_angle(azimuth - obj.record.original_azimuth)
    box = object_box(obj)
    if delta != 0.0:
        pts = rotate_points(obj.cloud.points, delta)
        box = box.rotated(delta)
    else:
        pts = obj.cloud.points
    merged = PointCloud(np.vstack([frame.points, pts]), frame.frame_id)
    idx = np.arange(len(frame), len(frame) + len(pts))
    return Placement(merged, box, idx)


class Outcome(enum.Enum):
    ACCEPTED = "accepted"
    OVERLAP_OR_FOV_FAIL = "overlap_or_fov_fail"
    DETECT_FAIL = "detect_fail"


@dataclass(frozen=True, eq=False)
class TrialResult:
    outcome: Outcome
    azimuth: float
    box: Box3D
    frame: Optional[Frame] = None
    label: Optional[LabeledObject] = None
    detection: object = None


def sample_azimuth(rng: np.random.Generator, fov: Fov) -> float:
    lo, hi = fov.azimuth_interval()
    return normalize_angle(rng.uniform(lo, hi))


def try_insert(frame: Frame, obj: OodObject, model, cfg: InjectConfig,
               rng: np.random.Generator, predictions: Optional[Sequence] = None,
               azimuth: Optional[float] = None) -> TrialResult:
    """One insertion trial.

    ``predictions`` are the model's detections on the unmodified frame; they
    are computed when omitted. ``azimuth`` overrides the random draw.
    """
    if predictions is None:
        predictions = run_detector(model, frame.cloud).detections
    if azimuth is None:
        azimuth = sample_azimuth(rng, cfg.fov)
    if len(frame.cloud):
        obj = adapt_intensity(obj, frame.cloud, cfg.intensity)
    placed = place_object(obj, frame.cloud, azimuth)
    box = placed.box
    if not cfg.fov.contains(box.center)[0]:
        return TrialResult(Outcome.OVERLAP_OR_FOV_FAIL, azimuth, box)
    for other in [o.box for o in frame.labels] + [d.box for d in predictions]:
        if bev_iou(box, other) > OVERLAP_EPS:
            return TrialResult(Outcome.OVERLAP_OR_FOV_FAIL, azimuth, box)
    after = run_detector(model, placed.cloud).detections
    confirm = None
    for det in after:
        if det.confidence >= cfg.tau and bev_iou(det.box, box) >= cfg.match_iou:
            confirm = det
            break
    if confirm is None or not _predictions_preserved(predictions, after, cfg.preserve_iou):
        return TrialResult(Outcome.DETECT_FAIL, azimuth, box)
    label = LabeledObject(box, obj.class_name, True, obj.record.category)
    new_frame = Frame(frame.frame_id, placed.cloud, frame.labels + (label,))
    return TrialResult(Outcome.ACCEPTED, azimuth, box, new_frame, label, confirm)


def _predictions_preserved(before, after, iou_thr: float) -> bool:
    for p in before:
        if not any(q.predicted_class == p.predicted_class and bev_iou(p.box, q.box) >= iou_thr
                   for q in after):
            return False
    return True


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class ClassStats:
    attempted_frames: int = 0
    inserted_count: int = 0
    injection_failure_trials: int = 0
    detection_failure_trials: int = 0
    accepted_trials: int = 0

    @property
    def injection_failures(self) -> float:
        """Mean overlap/FOV failures per attempted frame."""
        return self.injection_failure_trials / self.attempted_frames if self.attempted_frames else 0.0

    @property
    def detection_failures(self) -> float:
        """Mean detection failures per attempted frame."""
        return self.detection_failure_trials / self.attempted_frames if self.attempted_frames else 0.0


@dataclass(frozen=True)
class TrialRecord:
    class_name: str
    frame_id: str
    trial: int
    object_id: str
    azimuth: float
    outcome: Outcome


@dataclass
class InjectStats:
    per_class: Dict[str, ClassStats] = field(default_factory=OrderedDict)
    trials: List[TrialRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["class,attempted_frames,inserted_count,injection_failures,detection_failures"]
        for name, s in self.per_class.items():
            lines.append(f"{name},{s.attempted_frames},{s.inserted_count},"
                         f"{s.injection_failures:.6f},{s.detection_failures:.6f}")
        return "\n".join(lines) + "\n"


def generate_ood_dataset(dataset: Dataset, objects: Sequence[OodObject], model,
                         cfg: InjectConfig, classes: Optional[Sequence[str]] = None):
    """Insert up to ``zeta_max`` objects per OOD class, at most one per frame and class.

    Classes are processed in sorted order over the evolving dataset, so one
    frame can host objects of several classes. Returns ``(dataset, stats)``.
    """
    by_class: Dict[str, List[OodObject]] = OrderedDict()
    for o in objects:
        by_class.setdefault(o.class_name, []).append(o)
    if classes is None:
        classes = sorted(by_class)
    if not classes:
        raise EmptyDatabaseClass("OOD object database is empty")
    for c in classes:
        if not by_class.get(c):
            raise EmptyDatabaseClass(f"no database objects for class {c!r}")

    frames = list(dataset.frames)
    stats = InjectStats()
    for c in classes:
        pool = by_class[c]
        rng = derive_rng(cfg.rng_seed, "inject", c)
        st = stats.per_class.setdefault(c, ClassStats())
        for fi in range(len(frames)):
            if st.inserted_count >= cfg.zeta_max:
                break
            frame = frames[fi]
            st.attempted_frames += 1
            predictions = run_detector(model, frame.cloud).detections
            for trial in range(cfg.gamma_max):
                obj = pool[int(rng.integers(len(pool)))]
                res = try_insert(frame, obj, model, cfg, rng, predictions)
                stats.trials.append(TrialRecord(c, frame.frame_id, trial, obj.record.object_id,
                                                res.azimuth, res.outcome))
                if res.outcome is Outcome.OVERLAP_OR_FOV_FAIL:
                    st.injection_failure_trials += 1
                elif res.outcome is Outcome.DETECT_FAIL:
                    st.detection_failure_trials += 1
                else:
                    st.accepted_trials += 1
                    st.inserted_count += 1
                    frames[fi] = res.frame
                    break
    return Dataset(frames, dataset.classes), stats
