"""OOD scores for detections and feature vectors.

Every score is oriented so that larger means more likely OOD:

==================  =======================================================
max-softmax         ``1 - max FG probability``
uncertainty         predictive entropy, aleatoric entropy, mutual information
Mahalanobis         squared distance to the closest class-conditional Gaussian
OC-SVM              negated best per-class margin ``-max_c (<w_c, phi_c(x)> - rho_c)``
normalizing flow    ``-log p(x)``
==================  =======================================================

Fitted models are immutable and safe to share between threads.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import xlogy

from . import flow as flowlib
from .errors import DimensionMismatch, InsufficientSamples, ParseError

METHODS = ("max_softmax", "predictive_entropy", "aleatoric_entropy", "mutual_information",
           "mahalanobis", "ocsvm", "flow")
FEATURE_METHODS = ("mahalanobis", "ocsvm", "flow")
RHO_SLACK = 1e-12


# ---------------------------------------------------------------------------
# output-space scores

def score_max_softmax(det_or_probs) -> float:
    """``1 - max FG probability``; the last entry of the vector is background."""
    p = getattr(det_or_probs, "class_probs", det_or_probs)
    p = np.asarray(p, dtype=np.float64)
    return float(1.0 - p[:-1].max())


def entropy(p, axis=-1):
    return -np.sum(xlogy(p, p), axis=axis)


def score_uncertainty(samples) -> Tuple[float, float, float]:
    """(predictive entropy, aleatoric entropy, mutual information) of ``T`` softmax draws.

    Natural logarithms. Mutual information is returned as predictive minus
    aleatoric, so it can be a rounding error below zero (but is exactly zero
    when all draws are identical).
    """
    p = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    # means are taken as offsets from the first draw, so identical draws give
    # p_bar == p_0 and aleatoric == H(p_0) bit for bit, hence MI == 0 exactly
    p_bar = p[0] + (p - p[0]).mean(axis=0)
    h = entropy(np.vstack([p_bar, p]), axis=1)
    predictive = float(h[0])
    aleatoric = float(h[1] + (h[1:] - h[1]).mean())
    return predictive, aleatoric, predictive - aleatoric


# ---------------------------------------------------------------------------
# Mahalanobis

@dataclass(frozen=True, eq=False)
class ClassGaussian:
    label: int
    count: int
    mean: np.ndarray
    cov: np.ndarray  # regularized
    precision: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of cov


@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    classes: tuple
    dim: int
    reg: float = 1e-3

    def by_label(self, label: int) -> ClassGaussian:
        for c in self.classes:
            if c.label == label:
                return c
        raise KeyError(label)


def _group(samples) -> Dict[int, np.ndarray]:
    """Accept a mapping label -> (n, d) array or a sequence of FeatureSample."""
    if isinstance(samples, Mapping):
        return {int(k): np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in sorted(samples.items())}
    groups: Dict[int, list] = {}
    for s in samples:
        groups.setdefault(int(s.class_label), []).append(np.asarray(s.vector, dtype=np.float64))
    return {k: np.vstack(v) for k, v in sorted(groups.items())}


def streaming_moments(x: np.ndarray, batch: int = 64):
    """Mean and scatter matrix by pairwise merging of per-batch statistics."""
    n, mean, m2 = 0, np.zeros(x.shape[1]), np.zeros((x.shape[1], x.shape[1]))
    for start in range(0, x.shape[0], batch):
        xb = x[start:start + batch]
        nb = xb.shape[0]
        mb = xb.mean(axis=0)
        cb = xb - mb
        m2b = cb.T @ cb
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + np.outer(delta, delta) * (n * nb / tot)
        n = tot
    return n, mean, m2


def fit_mahalanobis(samples, batch: int = 64, epochs: int = 5, reg: float = 1e-3,
                    min_reg: float = 1e-6, skip_insufficient: bool = False) -> MahalanobisModel:
    """Per-class mean and full covariance from streamed batches.

    Statistics restart every epoch, so extra epochs reproduce the same values.
    The covariance is ``M2 / (n - 1) + eps * I`` with
    ``eps = reg * trace / d`` (floored at ``min_reg``; ``reg=0`` disables it).
    """
    groups = _group(samples)
    if not groups:
        raise InsufficientSamples("no samples")
    dims = {v.shape[1] for v in groups.values()}
    if len(dims) != 1:
        raise DimensionMismatch(f"samples have mixed dimensions {sorted(dims)}")
    d = dims.pop()
    fitted = []
    for label, x in groups.items():
        if x.shape[0] < d + 1:
            if skip_insufficient:
                continue
            raise InsufficientSamples(f"class {label}: {x.shape[0]} samples, need {d + 1}")
        for _ in range(max(1, epochs)):
            n, mean, m2 = streaming_moments(x, batch)
        cov = m2 / (n - 1)
        cov = 0.5 * (cov + cov.T)
        if reg > 0:
            eps = reg * np.trace(cov) / d
            cov = cov + max(eps, min_reg) * np.eye(d)
        chol = np.linalg.cholesky(cov)
        inv_l = solve_triangular(chol, np.eye(d), lower=True)
        precision = inv_l.T @ inv_l
        fitted.append(ClassGaussian(label, n, mean, cov, 0.5 * (precision + precision.T), chol))
    if not fitted:
        raise InsufficientSamples(f"no class has the {d + 1} samples needed")
    return MahalanobisModel(tuple(fitted), d, reg)


def mahalanobis_per_class(m: MahalanobisModel, x) -> np.ndarray:
    """Squared distances, shape ``(n, n_classes)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != m.dim:
        raise DimensionMismatch(f"expected dimension {m.dim}, got {x.shape[1]}")
    out = np.empty((x.shape[0], len(m.classes)))
    for j, c in enumerate(m.classes):
        y = solve_triangular(c.chol, (x - c.mean).T, lower=True)
        out[:, j] = np.einsum("ij,ij->j", y, y)
    return out


def score_mahalanobis(m: MahalanobisModel, x):
    d2 = mahalanobis_per_class(m, x).min(axis=1)
    return float(d2[0]) if np.ndim(x) == 1 else d2


# ---------------------------------------------------------------------------
# one-class SVM

@dataclass(frozen=True)
class OcSvmConfig:
    nu: float = 0.01
    gamma: float = 2.0
    batch: int = 64
    epochs: int = 5
    n_features: int = 256
    seed: int = 0
    t0: float = 50.0
    highest: str = "margin"  # or "outlier"

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")
        if self.highest not in ("margin", "outlier"):
            raise ValueError("highest must be 'margin' or 'outlier'")


@dataclass(frozen=True, eq=False)
class OcSvmClass:
    label: int
    omega: np.ndarray  # (d, D)
    phase: np.ndarray  # (D,)
    w: np.ndarray  # (D,)
    rho: float

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 / self.omega.shape[1]) * np.cos(x @ self.omega + self.phase)

    def decision(self, x) -> np.ndarray:
        """Signed margin: non-negative on the inlier side."""
        return self.features(np.atleast_2d(x)) @ self.w - self.rho


@dataclass(frozen=True, eq=False)
class OcSvmModel:
    classes: tuple
    dim: int
    nu: float
    gamma: float
    highest: str = "margin"


def _fit_ocsvm_class(x: np.ndarray, label: int, cfg: OcSvmConfig, rng) -> OcSvmClass:
    n, d = x.shape
    D = cfg.n_features
    omega = rng.normal(0.0, np.sqrt(2.0 * cfg.gamma), size=(d, D))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=D)
    proto = OcSvmClass(label, omega, phase, np.zeros(D), 0.0)
    phi = proto.features(x)
    k = max(int(np.ceil(cfg.nu * n)), 1)
    # warm start at the kernel mean embedding
    w = phi.mean(axis=0)
    w_avg, n_avg, t = np.zeros(D), 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            t += 1
            rho = _best_rho(phi @ w, k)
            pb = phi[idx]
            viol = (pb @ w) < rho
            grad = w - pb[viol].sum(axis=0) / (len(idx) * cfg.nu)
            w = w - grad / (t + cfg.t0)
            if epoch == cfg.epochs - 1:
                w_avg += w
                n_avg += 1
    if n_avg:
        w = w_avg / n_avg
    return OcSvmClass(label, omega, phase, w, _best_rho(phi @ w, k))


def _best_rho(margins: np.ndarray, k: int) -> float:
    """Exact minimizer over rho for fixed w: the k-th smallest margin, k = ceil(nu n).

    Lowered by a relative 1e-12 so that re-evaluating a training point (with a
    different matmul association) cannot flip it to the outlier side.
    """
    rho = float(np.partition(margins, k - 1)[k - 1])
    return rho - RHO_SLACK * max(1.0, abs(rho))


def fit_ocsvm(samples, cfg: OcSvmConfig = OcSvmConfig(), min_samples: int = 10,
              skip_insufficient: bool = False) -> OcSvmModel:
    """One primal OC-SVM per class on random Fourier features of the RBF kernel.

    Minimizes ``0.5 |w|^2 - rho + 1/(nu n) sum max(0, rho - <w, phi(x)>)``.
    ``w`` follows minibatch subgradient steps of size ``1 / (t + t0)``, starting
    from the feature mean and averaged over the last epoch; before every step
    and at the end ``rho`` is set to its exact minimizer given ``w``. That last
    step is what guarantees at most ``nu n`` training points strictly outside.
    """
    groups = _group(samples)
    dims = {v.shape[1] for v in groups.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"samples have mixed dimensions {sorted(dims)}")
    fitted = []
    for label, x in groups.items():
        if x.shape[0] < min_samples:
            if skip_insufficient:
                continue
            raise InsufficientSamples(f"class {label}: {x.shape[0]} samples, need {min_samples}")
        rng = np.random.default_rng([cfg.seed, label])
        fitted.append(_fit_ocsvm_class(x, label, cfg, rng))
    if not fitted:
        raise InsufficientSamples(f"no class has {min_samples} samples")
    return OcSvmModel(tuple(fitted), dims.pop(), cfg.nu, cfg.gamma, cfg.highest)


def ocsvm_decisions(m: OcSvmModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != m.dim:
        raise DimensionMismatch(f"expected dimension {m.dim}, got {x.shape[1]}")
    return np.column_stack([c.decision(x) for c in m.classes])


def score_ocsvm(m: OcSvmModel, x):
    dec = ocsvm_decisions(m, x)
    if m.highest == "margin":
        s = -dec.max(axis=1)
    else:
        s = (-dec).max(axis=1)
    return float(s[0]) if np.ndim(x) == 1 else s


# ---------------------------------------------------------------------------
# normalizing flow

def score_flow(model: flowlib.FlowModel, x):
    lp = flowlib.log_prob(model, x)
    return -lp


# ---------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"OODM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sI8s16sI")


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dumps_model(model, layer: str = "") -> bytes:
    buf = io.BytesIO()
    if isinstance(model, MahalanobisModel):
        tag, dim = b"maha", model.dim
        body = io.BytesIO()
        body.write(struct.pack("<dI", model.reg, len(model.classes)))
        for c in model.classes:
            body.write(struct.pack("<iQ", c.label, c.count))
            for arr in (c.mean, c.cov, c.precision, c.chol):
                body.write(_f8(arr))
    elif isinstance(model, OcSvmModel):
        tag, dim = b"ocsvm", model.dim
        body = io.BytesIO()
        D = model.classes[0].w.size
        body.write(struct.pack("<ddII8s", model.nu, model.gamma, D, len(model.classes),
                               model.highest.encode()))
        for c in model.classes:
            body.write(struct.pack("<id", c.label, c.rho))
            for arr in (c.omega, c.phase, c.w):
                body.write(_f8(arr))
    elif isinstance(model, flowlib.FlowModel):
        tag, dim = b"flow", model.d
        body = io.BytesIO(flowlib.dumps(model))
        body.seek(0, io.SEEK_END)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    buf.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, tag.ljust(8, b"\0"),
                                 layer.encode().ljust(16, b"\0"), dim))
    buf.write(body.getvalue())
    return buf.getvalue()


def loads_model(raw: bytes):
    """Return ``(model, method, layer)``."""
    if len(raw) < _MODEL_HEADER.size:
        raise ParseError("model file truncated in header")
    magic, version, tag, layer, dim = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise ParseError(f"unsupported model file (magic {magic!r}, version {version})")
    tag = tag.rstrip(b"\0").decode()
    layer = layer.rstrip(b"\0").decode()
    body = memoryview(raw)[_MODEL_HEADER.size:]
    try:
        if tag == "flow":
            return flowlib.loads(bytes(body)), "flow", layer
        off = 0

        def take(n_floats, shape):
            nonlocal off
            arr = np.frombuffer(body, dtype="<f8", count=n_floats, offset=off).astype(np.float64)
            off += 8 * n_floats
            return arr.reshape(shape)

        if tag == "maha":
            reg, k = struct.unpack_from("<dI", body, off)
            off += struct.calcsize("<dI")
            classes = []
            for _ in range(k):
                label, count = struct.unpack_from("<iQ", body, off)
                off += struct.calcsize("<iQ")
                mean = take(dim, (dim,))
                cov = take(dim * dim, (dim, dim))
                prec = take(dim * dim, (dim, dim))
                chol = take(dim * dim, (dim, dim))
                classes.append(ClassGaussian(label, count, mean, cov, prec, chol))
            return MahalanobisModel(tuple(classes), dim, reg), "mahalanobis", layer
        if tag == "ocsvm":
            nu, gamma, D, k, highest = struct.unpack_from("<ddII8s", body, off)
            off += struct.calcsize("<ddII8s")
            classes = []
            for _ in range(k):
                label, rho = struct.unpack_from("<id", body, off)
                off += struct.calcsize("<id")
                omega = take(dim * D, (dim, D))
                phase = take(D, (D,))
                w = take(D, (D,))
                classes.append(OcSvmClass(label, omega, phase, w, rho))
            return (OcSvmModel(tuple(classes), dim, nu, gamma, highest.rstrip(b"\0").decode()),
                    "ocsvm", layer)
    except (struct.error, ValueError) as exc:
        raise ParseError(f"corrupt {tag} model: {exc}") from None
    raise ParseError(f"unknown model tag {tag!r}")


def save_model(model, path, layer: str = "") -> None:
    Path(path).write_bytes(dumps_model(model, layer))


def load_model(path):
    return loads_model(Path(path).read_bytes())


def score_model(model, x):
    """Dispatch on the fitted model type; ``x`` is one vector or a batch."""
    if isinstance(model, MahalanobisModel):
        return score_mahalanobis(model, x)
    if isinstance(model, OcSvmModel):
        return score_ocsvm(model, x)
    if isinstance(model, flowlib.FlowModel):
        return score_flow(model, x)
    raise TypeError(f"not a fitted scorer: {type(model).__name__}")
