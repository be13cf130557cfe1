"""Mining unusual vehicles from box sizes.

Four DBSCAN clusterings run over standardized geometric features: a 2-D PCA
of ``(l, w, h, l/w, l/h, w/h, lw, lh, wh)``, ``[l, w]``, ``[l, h]`` and
``[w, h]``. A vehicle is a global outlier when any clustering puts it in
noise or in a small side cluster (fewer than 5% of all vehicles, never the
largest cluster).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateData

NOISE = -1
STD_GUARD = 1e-12
FEATURE_SETS = ("pca", "lw", "lh", "wh")


def geom_features(sizes) -> np.ndarray:
    """``(n, 9)`` matrix ``l, w, h, l/w, l/h, w/h, lw, lh, wh`` from ``(n, 3)`` sizes."""
    s = np.atleast_2d(np.asarray(sizes, dtype=np.float64))
    if s.shape[1] != 3:
        raise ValueError("sizes must have three columns")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise DegenerateData("box sizes must be finite and positive")
    l, w, h = s.T
    return np.column_stack([l, w, h, l / w, l / h, w / h, l * w, l * h, w * h])


def standardize(x) -> np.ndarray:
    """Zero mean, unit (population) variance per column; constant columns become 0."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    scale = np.where(sd > STD_GUARD * np.maximum(1.0, np.abs(mu)), sd, np.inf)
    return (x - mu) / scale


def pca_project(data, ndim: int = 2, standardize_columns: bool = True,
                return_explained: bool = False):
    """Project onto the top ``ndim`` principal axes.

    Columns are standardized first (constant columns contribute nothing). The
    sign of each axis is fixed so its largest-magnitude loading is positive.
    Raises DegenerateData when fewer than 3 rows are given or no column varies.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DegenerateData("PCA needs at least 3 rows")
    z = standardize(x) if standardize_columns else x - x.mean(axis=0)
    if not np.any(np.abs(z) > 0):
        raise DegenerateData("every column has zero variance")
    cov = z.T @ z / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:ndim]
    axes = vecs[:, order]
    pick = np.argmax(np.abs(axes), axis=0)
    axes = axes * np.sign(axes[pick, np.arange(axes.shape[1])])
    proj = z @ axes
    if return_explained:
        return proj, float(vals[order].sum() / vals.sum())
    return proj


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels ``0, 1, ...`` in order of discovery, ``NOISE`` (-1) otherwise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``. Clusters are grown breadth-first from unvisited
    core points in index order, so a border point reachable from two
    clusters joins the one seeded at the lower index.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = x.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(x)
    neigh = [np.sort(np.asarray(nb, dtype=np.int64)) for nb in tree.query_ball_point(x, eps)]
    core = np.array([len(nb) >= min_pts for nb in neigh])
    cid = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neigh[p]:
                if labels[q] == NOISE:
                    labels[q] = cid
                    if core[q]:
                        queue.append(q)
        cid += 1
    return labels


def k_distance_eps(points, k: int = 5, percentile: float = 90.0, floor: float = 1e-9) -> float:
    """``percentile`` of the distances to each point's ``k``-th nearest other point."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    k = min(k, x.shape[0] - 1)
    if k < 1:
        return floor
    d, _ = cKDTree(x).query(x, k=k + 1)
    return max(float(np.percentile(d[:, k], percentile)), floor)


def small_cluster_outliers(labels: np.ndarray, min_fraction: float = 0.05) -> np.ndarray:
    """Indices of noise points and members of non-largest clusters below ``min_fraction * n``."""
    labels = np.asarray(labels)
    n = len(labels)
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    small = set()
    if ids.size:
        main = ids[np.argmax(counts)]  # ties -> lowest id
        small = {c for c, m in zip(ids, counts) if c != main and m < min_fraction * n}
    mask = (labels == NOISE) | np.isin(labels, list(small))
    return np.nonzero(mask)[0]


@dataclass(frozen=True, eq=False)
class Clustering:
    name: str
    eps: float
    labels: np.ndarray
    outliers: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max() + 1) if len(self.labels) else 0


def _sizes(vehicles) -> np.ndarray:
    if isinstance(vehicles, np.ndarray):
        return vehicles.astype(np.float64)
    if len(vehicles) and hasattr(vehicles[0], "size"):
        return np.array([v.size for v in vehicles], dtype=np.float64)
    if len(vehicles) and hasattr(vehicles[0], "box"):
        return np.array([v.box.size for v in vehicles], dtype=np.float64)
    return np.asarray(vehicles, dtype=np.float64)


def feature_sets(sizes) -> Dict[str, np.ndarray]:
    f = geom_features(sizes)
    return {
        "pca": pca_project(f, 2),
        "lw": f[:, [0, 1]],
        "lh": f[:, [0, 2]],
        "wh": f[:, [1, 2]],
    }


def mine_outliers(vehicles: Sequence, min_pts: int = 5, percentile: float = 90.0,
                  min_fraction: float = 0.05, sets: Sequence[str] = FEATURE_SETS,
                  return_diagnostics: bool = False):
    """Sorted indices of global outliers among ``vehicles`` (Box3D, labeled objects or sizes).

    With ``return_diagnostics`` also returns one ``Clustering`` per feature set.
    """
    sizes = _sizes(vehicles)
    if sizes.ndim != 2 or sizes.shape[0] < 10:
        raise DegenerateData("mining needs at least 10 vehicles")
    f = geom_features(sizes)
    diagnostics: List[Clustering] = []
    if np.all(np.ptp(f, axis=0) == 0):
        # identical vehicles: one cluster everywhere, nothing to report
        for name in sets:
            diagnostics.append(Clustering(name, 0.0, np.zeros(len(f), dtype=np.int64),
                                          np.zeros(0, dtype=np.int64)))
        out = np.zeros(0, dtype=np.int64)
        return (out, diagnostics) if return_diagnostics else out
    feats = feature_sets(sizes)
    found = set()
    for name in sets:
        z = standardize(feats[name])
        eps = k_distance_eps(z, min_pts, percentile)
        labels = dbscan(z, eps, min_pts)
        outl = small_cluster_outliers(labels, min_fraction)
        diagnostics.append(Clustering(name, eps, labels, outl))
        found.update(int(i) for i in outl)
    out = np.array(sorted(found), dtype=np.int64)
    return (out, diagnostics) if return_diagnostics else out


def format_diagnostics(outliers, diagnostics: Sequence[Clustering]) -> str:
    """Structured text: one ``key=value`` line per clustering, then the union."""
    lines = []
    for c in diagnostics:
        lines.append(f"clustering={c.name} eps={c.eps!r} n_clusters={c.n_clusters} "
                     f"n_noise={int(np.sum(c.labels == NOISE))} "
                     f"outliers={','.join(str(int(i)) for i in c.outliers)}")
    lines.append(f"union={','.join(str(int(i)) for i in outliers)}")
    return "\n".join(lines) + "\n"
