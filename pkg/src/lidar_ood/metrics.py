"""Threshold-free OOD metrics, class-balanced evaluation and the OOD-threshold sweep.

Conventions: larger score = more likely OOD, and OOD is the positive class
unless stated otherwise. A sample is called OOD at threshold ``t`` when
``score >= t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .core import bev_iou
from .errors import EmptyStratum, EmptyThresholds, SingleClassSet
from .seeding import derive_rng

TARGET_TPR = 0.95
METRIC_NAMES = ("auroc", "aupr_in", "aupr_out", "detection_error", "fpr_at_95_tpr")
METRIC_HEADERS = ("AUROC", "AUPR-In", "AUPR-Out", "D_e", "FPR@95TPR")


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Parallel arrays: one OOD score per detection plus its labels."""

    scores: np.ndarray
    is_ood: np.ndarray
    class_label: np.ndarray = None
    frame_id: np.ndarray = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.is_ood, dtype=bool).reshape(-1)
        if s.shape != y.shape:
            raise ValueError("scores and is_ood differ in length")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        cl = self.class_label
        cl = np.zeros(len(s), dtype=object) if cl is None else np.asarray(cl, dtype=object).reshape(-1)
        fr = self.frame_id
        fr = np.full(len(s), "", dtype=object) if fr is None else np.asarray(fr, dtype=object).reshape(-1)
        if len(cl) != len(s) or len(fr) != len(s):
            raise ValueError("label columns differ in length")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "is_ood", y)
        object.__setattr__(self, "class_label", cl)
        object.__setattr__(self, "frame_id", fr)

    def __len__(self):
        return len(self.scores)

    def subset(self, idx) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.is_ood[idx], self.class_label[idx], self.frame_id[idx])

    @property
    def n_ood(self) -> int:
        return int(self.is_ood.sum())

    @property
    def n_id(self) -> int:
        return len(self) - self.n_ood


def _xy(s, is_ood=None) -> Tuple[np.ndarray, np.ndarray]:
    if is_ood is None:
        if not isinstance(s, ScoredSet):
            raise TypeError("pass a ScoredSet or (scores, is_ood)")
        return s.scores, s.is_ood
    return np.asarray(s, dtype=np.float64).reshape(-1), np.asarray(is_ood, dtype=bool).reshape(-1)


def _check_two_classes(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise SingleClassSet("need at least one ID and one OOD entry")


# ---------------------------------------------------------------------------
# threshold-free metrics

def auroc(s, is_ood=None) -> float:
    """P(score_OOD > score_ID) + 0.5 P(tie), from the Mann-Whitney mid-rank sum."""
    x, y = _xy(s, is_ood)
    _check_two_classes(y)
    n1 = int(y.sum())
    n0 = len(y) - n1
    ranks = rankdata(x)  # average ranks for ties
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def aupr(s, is_ood=None, positive: str = "ood") -> float:
    """Non-interpolated area under the precision-recall curve.

    ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds in decreasing
    order. With ``positive="id"`` scores are negated and ID entries become the
    positives.
    """
    x, y = _xy(s, is_ood)
    _check_two_classes(y)
    if positive == "id":
        x, y = -x, ~y
    elif positive != "ood":
        raise ValueError("positive must be 'ood' or 'id'")
    order = np.argsort(-x, kind="mergesort")
    xs, ys = x[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(xs))[0], len(xs) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    # integer recall steps keep a perfect curve at exactly 1
    return float(np.sum(np.diff(np.r_[0, tp]) * precision) / tp[-1])


def aupr_in(s, is_ood=None) -> float:
    return aupr(s, is_ood, positive="id")


def aupr_out(s, is_ood=None) -> float:
    return aupr(s, is_ood, positive="ood")


def _min_tp(n_pos: int, tpr: float = TARGET_TPR) -> int:
    """Smallest TP count with TP / n_pos >= tpr, without float round-off at the boundary."""
    k = math.ceil(tpr * n_pos)
    while k > 0 and (k - 1) / n_pos >= tpr:
        k -= 1
    while k / n_pos < tpr:
        k += 1
    return k


def operating_threshold(s, is_ood=None, tpr: float = TARGET_TPR) -> float:
    """The largest threshold whose TPR (OOD positive, ``score >= t``) is at least ``tpr``."""
    x, y = _xy(s, is_ood)
    _check_two_classes(y)
    pos = np.sort(x[y])[::-1]
    return float(pos[_min_tp(len(pos), tpr) - 1])


def fpr_at_95_tpr(s, is_ood=None) -> float:
    """FPR at the operating threshold (no interpolation between thresholds)."""
    x, y = _xy(s, is_ood)
    t = operating_threshold(x, y)
    return float(np.mean(x[~y] >= t))


def detection_error(s, is_ood=None) -> float:
    """``0.5 (1 - 0.95) + 0.5 FPR`` at the TPR = 0.95 operating point."""
    return 0.5 * round(1.0 - TARGET_TPR, 12) + 0.5 * fpr_at_95_tpr(s, is_ood)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class MetricReport:
    auroc: float
    aupr_in: float
    aupr_out: float
    detection_error: float
    fpr_at_95_tpr: float
    n_id: int
    n_ood: int
    sd: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)
    repeats: int = 1

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def as_dict(self) -> Dict[str, float]:
        out = dict(zip(METRIC_NAMES, self.values()))
        out.update({k + "_sd": v for k, v in zip(METRIC_NAMES, self.sd)})
        out.update(n_id=self.n_id, n_ood=self.n_ood, repeats=self.repeats)
        return out


def evaluate(s, is_ood=None) -> MetricReport:
    """All five metrics on one set, without resampling."""
    x, y = _xy(s, is_ood)
    _check_two_classes(y)
    return MetricReport(auroc(x, y), aupr_in(x, y), aupr_out(x, y), detection_error(x, y),
                        fpr_at_95_tpr(x, y), int((~y).sum()), int(y.sum()))


def strata(s: ScoredSet) -> Dict[tuple, np.ndarray]:
    """Indices per observed ``(class_label, is_ood)`` pair, in sorted key order."""
    keys: Dict[tuple, list] = {}
    for i, (c, o) in enumerate(zip(s.class_label, s.is_ood)):
        keys.setdefault((str(c), bool(o)), []).append(i)
    return {k: np.asarray(keys[k]) for k in sorted(keys)}


def balanced_eval(s: ScoredSet, repeats: int = 10, seed: int = 0) -> MetricReport:
    """Class-balanced resampling: every stratum is cut to the smallest stratum size.

    Strata are the observed (class_label, is_ood) pairs. Each repeat samples
    without replacement with its own derived seed; the report holds the mean
    and the population standard deviation over repeats.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    groups = strata(s)
    if not any(k[1] for k in groups) or not any(not k[1] for k in groups):
        raise EmptyStratum("balanced evaluation needs ID and OOD strata")
    m = min(len(v) for v in groups.values())
    rows = []
    for r in range(repeats):
        rng = derive_rng(seed, "balanced_eval", r)
        idx = np.concatenate([v if len(v) == m else np.sort(rng.choice(v, m, replace=False))
                              for v in groups.values()])
        rows.append(evaluate(s.subset(idx)).values())
    arr = np.asarray(rows)
    n_id = sum(m for k in groups if not k[1])
    n_ood = sum(m for k in groups if k[1])
    return MetricReport(*arr.mean(axis=0), n_id=n_id, n_ood=n_ood,
                        sd=tuple(float(v) for v in arr.std(axis=0)), repeats=repeats)


def format_table(rows: Mapping[str, MetricReport], percent: bool = True, key: str = "method") -> str:
    """Aligned text table with ``mean ± sd`` cells, one row per key."""
    scale = 100.0 if percent else 1.0
    width = max([len(key)] + [len(k) for k in rows])
    head = key.ljust(width) + "".join(h.rjust(18) for h in METRIC_HEADERS)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        cells = "".join(f"{v * scale:.2f} ± {sd * scale:.2f}".rjust(18)
                        for v, sd in zip(rep.values(), rep.sd))
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines) + "\n"


def report_csv(rows: Mapping[str, MetricReport], key: str = "method") -> str:
    cols = [key] + [c for n in METRIC_NAMES for c in (n, n + "_sd")] + ["n_id", "n_ood", "repeats"]
    lines = [",".join(cols)]
    for name, rep in rows.items():
        d = rep.as_dict()
        lines.append(",".join([name] + [repr(float(d[c])) for c in cols[1:-3]]
                              + [str(rep.n_id), str(rep.n_ood), str(rep.repeats)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# OOD-threshold sweep

DEFAULT_MATCH_IOU = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """The parts of a prediction the sweep needs, e.g. when read back from a table."""

    box: object  # core.Box3D
    predicted_class: object  # class name or index
    confidence: float


@dataclass(frozen=True, eq=False)
class ScoredDetection:
    frame_id: str
    detection: object  # core.Detection or DetectionRecord
    ood_score: float


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    mAP: float
    n_fp: int
    n_removed: int
    ood_recall: float
    ap: Tuple[Tuple[str, float], ...] = field(default=())


def interpolated_ap(tp: np.ndarray, n_gt: int, n_points: int = 40) -> float:
    """KITTI-style AP from a confidence-ordered TP flag vector.

    40 points samples recall at 1/40 ... 1; 11 points samples 0, 0.1 ... 1.
    Precision at recall r is the maximum precision at any recall >= r.
    """
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 11) if n_points == 11 else np.arange(1, n_points + 1) / n_points
    out = 0.0
    for r in grid:
        hit = np.nonzero(recall >= r - 1e-12)[0]
        if hit.size:
            out += envelope[hit[0]]
    return float(out / len(grid))


def _greedy_match(dets: Sequence[ScoredDetection], gt: Mapping[str, Sequence], cls: str,
                  thr: float) -> np.ndarray:
    """TP flags for ``dets`` (already in confidence order) against ID ground truth of ``cls``."""
    used: Dict[str, set] = {}
    flags = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        objs = gt.get(d.frame_id, ())
        taken = used.setdefault(d.frame_id, set())
        best, best_j = thr, -1
        for j, o in enumerate(objs):
            if j in taken or o.is_ood or o.class_name != cls:
                continue
            iou = bev_iou(d.detection.box, o.box)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            taken.add(best_j)
            flags[i] = True
    return flags


def _class_name(det, classes: Sequence[str]) -> str:
    c = det.predicted_class
    return c if isinstance(c, str) else classes[int(c)]


def ood_labeled(dets: Sequence[ScoredDetection], gt: Mapping[str, Sequence],
                classes: Sequence[str] = ("Car", "Pedestrian", "Cyclist"),
                match_iou: Mapping[str, float] = DEFAULT_MATCH_IOU) -> np.ndarray:
    """Flags for predictions overlapping an is_ood ground-truth object above their class threshold."""
    out = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        thr = match_iou.get(_class_name(d.detection, classes), 0.5)
        out[i] = any(o.is_ood and bev_iou(d.detection.box, o.box) >= thr
                     for o in gt.get(d.frame_id, ()))
    return out


def ood_threshold_sweep(dets: Sequence[ScoredDetection], gt: Mapping[str, Sequence],
                        thresholds: Sequence[float], classes: Sequence[str] = ("Car", "Pedestrian", "Cyclist"),
                        match_iou: Mapping[str, float] = DEFAULT_MATCH_IOU,
                        n_points: int = 40) -> List[SweepRow]:
    """Drop predictions with OOD score above each threshold and re-evaluate.

    ``classes`` names the FG classes; integer ``predicted_class`` values index it.

    Per threshold: mAP over ``classes`` with at least one ID ground-truth box
    (NaN if none has any), the number of surviving predictions not matched to
    ID ground truth, the number removed, and the fraction of OOD-labeled
    predictions (see ``ood_labeled``) that were removed (NaN without any).
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise EmptyThresholds("no thresholds given")
    dets = list(dets)
    scores = np.array([d.ood_score for d in dets], dtype=np.float64)
    conf = np.array([d.detection.confidence for d in dets], dtype=np.float64)
    order = np.argsort(-conf, kind="mergesort")
    is_ood_pred = ood_labeled(dets, gt, classes, match_iou)
    n_gt = {c: sum(1 for objs in gt.values() for o in objs if not o.is_ood and o.class_name == c)
            for c in classes}
    rows = []
    for t in thresholds:
        keep = scores <= t
        tp_all = np.zeros(len(dets), dtype=bool)
        aps = []
        for c in classes:
            idx = [i for i in order if keep[i] and _class_name(dets[i].detection, classes) == c]
            flags = _greedy_match([dets[i] for i in idx], gt, c, match_iou.get(c, 0.5))
            tp_all[idx] = flags
            aps.append((c, interpolated_ap(flags, n_gt[c], n_points)))
        valid = [a for _, a in aps if not math.isnan(a)]
        m_ap = float(np.mean(valid)) if valid else float("nan")
        removed = ~keep
        n_ood = int(is_ood_pred.sum())
        recall = float((removed & is_ood_pred).sum() / n_ood) if n_ood else float("nan")
        rows.append(SweepRow(float(t), m_ap, int((keep & ~tp_all).sum()), int(removed.sum()),
                             recall, tuple(aps)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["threshold,mAP,n_fp,n_removed,ood_recall"]
    for r in rows:
        lines.append(f"{r.threshold!r},{r.mAP!r},{r.n_fp},{r.n_removed},{r.ood_recall!r}")
    return "\n".join(lines) + "\n"
