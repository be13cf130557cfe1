"""Independent brute-force oracles used by the unit and acceptance tests.

Nothing here imports the implementation under test except plain data types.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# geometry

def in_box_frame(box, xyz):
    """Points expressed in the box frame (center at the origin, heading along +x)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = np.asarray(xyz, dtype=float) - np.asarray(box.center)
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    return np.column_stack([u, v, d[:, 2]])


def inside_bev(box, xy):
    p = in_box_frame(box, np.column_stack([xy, np.full(len(xy), box.center[2])]))
    return (np.abs(p[:, 0]) <= box.size[0] / 2) & (np.abs(p[:, 1]) <= box.size[1] / 2)


def inside_3d(box, xyz):
    p = in_box_frame(box, xyz)
    return ((np.abs(p[:, 0]) <= box.size[0] / 2) & (np.abs(p[:, 1]) <= box.size[1] / 2)
            & (np.abs(p[:, 2]) <= box.size[2] / 2))


def _bev_extent(boxes):
    r = [0.5 * math.hypot(b.size[0], b.size[1]) for b in boxes]
    lo = np.min([[b.center[0] - ri, b.center[1] - ri] for b, ri in zip(boxes, r)], axis=0)
    hi = np.max([[b.center[0] + ri, b.center[1] + ri] for b, ri in zip(boxes, r)], axis=0)
    return lo, hi


def mc_bev_iou(a, b, n, rng):
    """IoU of the two footprints by uniform sampling over a common bounding square."""
    lo, hi = _bev_extent([a, b])
    xy = rng.uniform(lo, hi, size=(n, 2))
    ia, ib = inside_bev(a, xy), inside_bev(b, xy)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def mc_iou3d(a, b, n, rng):
    lo, hi = _bev_extent([a, b])
    zlo = min(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    zhi = max(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    xyz = rng.uniform(np.r_[lo, zlo], np.r_[hi, zhi], size=(n, 3))
    ia, ib = inside_3d(a, xyz), inside_3d(b, xyz)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def mc_iou_from_a(a, b, n, rng, volumetric=False):
    """IoU by sampling uniformly inside ``a`` only.

    The fraction of samples that fall in ``b`` estimates |a & b| / |a|; the
    box volumes (or footprint areas) are exact, so
    IoU = f|a| / (|a| + |b| - f|a|). Samples are mapped straight from a's
    frame into b's frame (rotation by the yaw difference plus an offset).
    """
    dy = b.yaw - a.yaw
    c, s = math.cos(dy), math.sin(dy)
    cb, sb = math.cos(b.yaw), math.sin(b.yaw)
    ox, oy = a.center[0] - b.center[0], a.center[1] - b.center[1]
    # offset of a's center expressed in b's frame
    tu, tv = cb * ox + sb * oy, -sb * ox + cb * oy
    u = (rng.random(n) - 0.5) * a.size[0]
    v = (rng.random(n) - 0.5) * a.size[1]
    ub = c * u + s * v + tu
    vb = -s * u + c * v + tv
    inside = (np.abs(ub) <= b.size[0] / 2) & (np.abs(vb) <= b.size[1] / 2)
    if volumetric:
        w = (rng.random(n) - 0.5) * a.size[2] + (a.center[2] - b.center[2])
        inside &= np.abs(w) <= b.size[2] / 2
    dims = 3 if volumetric else 2
    va, vb_ = float(np.prod(a.size[:dims])), float(np.prod(b.size[:dims]))
    inter = float(np.count_nonzero(inside)) / n * va
    return inter / (va + vb_ - inter)


# ---------------------------------------------------------------------------
# metrics (OOD = positive, "score >= t" means flagged OOD)

def auroc_pairs(scores, is_ood):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_ood, dtype=bool)
    pos, neg = s[y], s[~y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def confusion(scores, is_ood, t):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_ood, dtype=bool)
    flagged = s >= t
    tp = int(np.sum(flagged & y))
    fp = int(np.sum(flagged & ~y))
    fn = int(np.sum(~flagged & y))
    tn = int(np.sum(~flagged & ~y))
    return tp, fp, fn, tn


def aupr_enum(scores, is_ood, positive="ood"):
    """Step-wise PR area by enumerating every distinct threshold, highest first."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_ood, dtype=bool)
    if positive == "id":
        s, y = -s, ~y
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        tp, fp, fn, _ = confusion(s, y, t)
        recall = tp / (tp + fn)
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def fpr95_enum(scores, is_ood):
    """FPR at the largest threshold whose TPR reaches 95% (integer-exact comparison)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_ood, dtype=bool)
    n_pos = int(y.sum())
    best = None
    for t in sorted(set(s.tolist())):
        tp, fp, fn, tn = confusion(s, y, t)
        if 100 * tp >= 95 * n_pos:
            best = fp / (fp + tn)
    return best


def detection_error_enum(scores, is_ood):
    return 0.5 * 0.05 + 0.5 * fpr95_enum(scores, is_ood)


# ---------------------------------------------------------------------------
# DBSCAN by explicit density reachability

def dbscan_oracle(x, eps, min_pts):
    """Core points = >= min_pts points within eps (self included). Core points
    connected through eps-edges form clusters, numbered by their smallest core
    index; a border point joins the adjacent cluster with the smallest number."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    adj = d <= eps
    core = adj.sum(1) >= min_pts
    comp = -np.ones(n, dtype=int)
    for i in range(n):
        if core[i] and comp[i] < 0:
            stack, comp[i] = [i], i
            while stack:
                p = stack.pop()
                for q in np.nonzero(adj[p] & core)[0]:
                    if comp[q] < 0:
                        comp[q] = i
                        stack.append(q)
    roots = sorted(set(comp[core].tolist()))
    number = {r: k for k, r in enumerate(roots)}
    labels = -np.ones(n, dtype=int)
    for i in range(n):
        if core[i]:
            labels[i] = number[comp[i]]
        else:
            near = [number[comp[j]] for j in np.nonzero(adj[i] & core)[0]]
            if near:
                labels[i] = min(near)
    return labels


# ---------------------------------------------------------------------------
# statistics

def two_pass_cov(x):
    x = np.asarray(x, dtype=float)
    mu = x.sum(0) / len(x)
    c = x - mu
    return mu, c.T @ c / (len(x) - 1)


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.column_stack(cols)


def entropy_direct(p):
    return -sum(v * math.log(v) for v in p if v > 0)


# ---------------------------------------------------------------------------
# OOD-threshold sweep by filtering and recounting from scratch

def _iou_fn():
    from lidar_ood.core import bev_iou  # geometry is checked separately
    return bev_iou


def ap40_oracle(conf_tp, n_gt):
    """AP from (confidence, is_tp) pairs: max precision at recall >= r, r = 1/40..1."""
    if n_gt == 0:
        return float("nan")
    ranked = sorted(conf_tp, key=lambda p: -p[0])
    pts, tp = [], 0
    for k, (_, hit) in enumerate(ranked, start=1):
        tp += hit
        pts.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(1, 41):
        r = i / 40
        cands = [p for rec, p in pts if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 40


def sweep_recount(dets, gt, t, classes, match_iou):
    """dets: list of (frame_id, box, class_name, confidence, score); gt: frame -> LabeledObject list."""
    iou = _iou_fn()
    kept = [d for d in dets if d[4] <= t]
    removed = [d for d in dets if d[4] > t]
    tp_ids, aps = set(), []
    for c in classes:
        mine = sorted([d for d in kept if d[2] == c], key=lambda d: -d[3])
        used, pairs = set(), []
        for d in mine:
            best, pick = match_iou[c], None
            for j, o in enumerate(gt.get(d[0], [])):
                if o.is_ood or o.class_name != c or (d[0], j) in used:
                    continue
                v = iou(d[1], o.box)
                if v >= best:
                    best, pick = v, j
            if pick is not None:
                used.add((d[0], pick))
                tp_ids.add(id(d))
            pairs.append((d[3], pick is not None))
        n_gt = sum(1 for objs in gt.values() for o in objs if not o.is_ood and o.class_name == c)
        aps.append(ap40_oracle(pairs, n_gt))
    valid = [a for a in aps if a == a]
    n_fp = sum(1 for d in kept if id(d) not in tp_ids)

    def ood_hit(d):
        return any(o.is_ood and iou(d[1], o.box) >= match_iou[d[2]] for o in gt.get(d[0], []))

    n_ood = sum(1 for d in dets if ood_hit(d))
    recall = sum(1 for d in removed if ood_hit(d)) / n_ood if n_ood else float("nan")
    return (sum(valid) / len(valid) if valid else float("nan")), n_fp, len(removed), recall
