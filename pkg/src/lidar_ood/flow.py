"""RealNVP density estimator in plain numpy.

Each affine coupling layer keeps the coordinates selected by its binary mask
``b`` and updates the others::

    y = b*x + (1-b) * (x * exp(s(b*x)) + t(b*x))

with ``s = alpha * tanh(net_s(b*x))`` and ``t = net_t(b*x)``. Both nets are
two-hidden-layer tanh perceptrons. The Jacobian is triangular, so the log
determinant is the sum of ``s`` over the updated coordinates. Inputs are
standardized per dimension inside the model; that affine map contributes
``-sum(log std)`` to the log determinant.

Gradients are derived by hand; :func:`grad_nll` returns the gradient of the
mean negative log-likelihood with respect to the flat parameter vector
``model.theta``.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptySamples, NonFiniteActivation, NonFiniteGradient, ParseError

LOG_2PI = math.log(2.0 * math.pi)
_NET_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")

MAGIC = b"RNVP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


def coupling_masks(d: int, n_layers: int) -> np.ndarray:
    """Alternating complementary half-masks; the first keeps the first ceil(d/2) dims."""
    if d < 2:
        raise ValueError("a coupling flow needs at least two dimensions")
    first = np.zeros(d)
    first[: (d + 1) // 2] = 1.0
    return np.array([first if k % 2 == 0 else 1.0 - first for k in range(n_layers)])


def _layout(d: int, hidden: int) -> List[Tuple[str, tuple]]:
    shapes = {"W1": (d, hidden), "b1": (hidden,), "W2": (hidden, hidden), "b2": (hidden,),
              "W3": (hidden, d), "b3": (d,)}
    out = []
    for net in ("s", "t"):
        out.extend((f"{net}{k}", shapes[k]) for k in _NET_KEYS)
    out.append(("alpha", ()))
    return out


class FlowModel:
    """Coupling-layer stack with parameters held in one flat float64 vector.

    ``layers[k][name]`` are views into ``theta``; updating ``theta`` in place
    updates every layer.
    """

    def __init__(self, d: int, n_layers: int = 6, hidden: int = 128, alpha_init: float = 2.0,
                 theta: Optional[np.ndarray] = None, mean=None, std=None):
        if n_layers < 2 or n_layers % 2:
            raise ValueError("number of coupling layers must be even and >= 2")
        self.d, self.n_layers, self.hidden, self.alpha_init = int(d), int(n_layers), int(hidden), float(alpha_init)
        self.masks = coupling_masks(self.d, self.n_layers)
        self._layout = _layout(self.d, self.hidden)
        per_layer = sum(int(np.prod(s)) if s else 1 for _, s in self._layout)
        self.n_params = per_layer * self.n_layers
        self.theta = np.zeros(self.n_params) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {self.theta.shape}")
        self.mean = np.zeros(self.d) if mean is None else np.array(mean, dtype=np.float64)
        self.std = np.ones(self.d) if std is None else np.array(std, dtype=np.float64)
        self.layers = self._views(self.theta)

    def _views(self, flat: np.ndarray) -> List[dict]:
        layers, off = [], 0
        for _ in range(self.n_layers):
            layer = {}
            for name, shape in self._layout:
                size = int(np.prod(shape)) if shape else 1
                layer[name] = flat[off:off + size].reshape(shape) if shape else flat[off:off + 1]
                off += size
            layers.append(layer)
        return layers

    def copy(self) -> "FlowModel":
        return FlowModel(self.d, self.n_layers, self.hidden, self.alpha_init, self.theta.copy(),
                         self.mean.copy(), self.std.copy())

    @classmethod
    def initialized(cls, d: int, n_layers: int = 6, hidden: int = 128, alpha_init: float = 2.0,
                    rng: Optional[np.random.Generator] = None) -> "FlowModel":
        """Glorot-uniform hidden layers, zero output layers: the identity map."""
        rng = rng or np.random.default_rng(0)
        m = cls(d, n_layers, hidden, alpha_init)
        for layer in m.layers:
            for net in ("s", "t"):
                for w in ("W1", "W2"):
                    W = layer[f"{net}{w}"]
                    lim = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
                    W[...] = rng.uniform(-lim, lim, W.shape)
            layer["alpha"][...] = alpha_init
        return m


def random_model(d: int, n_layers: int = 2, hidden: int = 8, scale: float = 0.3,
                 rng: Optional[np.random.Generator] = None) -> FlowModel:
    """Every parameter drawn from N(0, scale^2); alpha drawn around 1. For testing."""
    rng = rng or np.random.default_rng(0)
    m = FlowModel(d, n_layers, hidden)
    m.theta[:] = rng.normal(0.0, scale, m.n_params)
    for layer in m.layers:
        layer["alpha"][...] = 1.0 + rng.uniform(-0.5, 0.5)
    return m


# ---------------------------------------------------------------------------
# forward / inverse

def _mlp(layer, net, x):
    a1 = x @ layer[f"{net}W1"] + layer[f"{net}b1"]
    h1 = np.tanh(a1)
    a2 = h1 @ layer[f"{net}W2"] + layer[f"{net}b2"]
    h2 = np.tanh(a2)
    out = h2 @ layer[f"{net}W3"] + layer[f"{net}b3"]
    return out, (x, h1, h2)


def _mlp_backward(layer, net, cache, g_out, grads):
    x, h1, h2 = cache
    grads[f"{net}W3"] += h2.T @ g_out
    grads[f"{net}b3"] += g_out.sum(axis=0)
    g_a2 = (g_out @ layer[f"{net}W3"].T) * (1.0 - h2 * h2)
    grads[f"{net}W2"] += h1.T @ g_a2
    grads[f"{net}b2"] += g_a2.sum(axis=0)
    g_a1 = (g_a2 @ layer[f"{net}W2"].T) * (1.0 - h1 * h1)
    grads[f"{net}W1"] += x.T @ g_a1
    grads[f"{net}b1"] += g_a1.sum(axis=0)
    return g_a1 @ layer[f"{net}W1"].T


def _coupling(layer, b, x):
    xm = x * b
    raw, cache_s = _mlp(layer, "s", xm)
    th = np.tanh(raw)
    s = layer["alpha"][0] * th
    t, cache_t = _mlp(layer, "t", xm)
    nb = 1.0 - b
    y = xm + nb * (x * np.exp(s) + t)
    return y, (nb * s).sum(axis=1), (x, th, s, cache_s, cache_t)


def _as_batch(model, x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.d:
        raise DimensionMismatch(f"expected dimension {model.d}, got {arr.shape[1]}")
    return arr, single


def _forward(model: FlowModel, x: np.ndarray, keep_cache: bool = False):
    h = (x - model.mean) / model.std
    log_det = np.full(x.shape[0], -np.log(model.std).sum())
    caches = []
    for layer, b in zip(model.layers, model.masks):
        h, ld, cache = _coupling(layer, b, h)
        log_det = log_det + ld
        if keep_cache:
            caches.append(cache)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(log_det))):
        raise NonFiniteActivation("non-finite value in forward pass")
    return h, log_det, caches


def forward(model: FlowModel, x):
    """Map data to latent space. Returns ``(z, log_det)``; batches are supported."""
    arr, single = _as_batch(model, x)
    z, ld, _ = _forward(model, arr)
    return (z[0], float(ld[0])) if single else (z, ld)


def inverse(model: FlowModel, z):
    arr, single = _as_batch(model, z)
    h = arr
    for layer, b in zip(reversed(model.layers), model.masks[::-1]):
        hm = h * b
        raw, _ = _mlp(layer, "s", hm)
        s = layer["alpha"][0] * np.tanh(raw)
        t, _ = _mlp(layer, "t", hm)
        h = hm + (1.0 - b) * (h - t) * np.exp(-s)
    x = h * model.std + model.mean
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation("non-finite value in inverse pass")
    return x[0] if single else x


def log_prob(model: FlowModel, x):
    """log N(z; 0, I) + log|det dz/dx|."""
    arr, single = _as_batch(model, x)
    z, ld, _ = _forward(model, arr)
    lp = -0.5 * model.d * LOG_2PI - 0.5 * np.einsum("ij,ij->i", z, z) + ld
    return float(lp[0]) if single else lp


def nll(model: FlowModel, batch) -> float:
    return float(-np.mean(log_prob(model, np.atleast_2d(batch))))


# ---------------------------------------------------------------------------
# gradients

def grad_nll(model: FlowModel, batch) -> Tuple[np.ndarray, float]:
    """Return ``(gradient of mean NLL w.r.t. model.theta, mean NLL)``."""
    x, _ = _as_batch(model, batch)
    n = x.shape[0]
    if n == 0:
        raise EmptySamples("empty batch")
    z, log_det, caches = _forward(model, x, keep_cache=True)
    loss = float(np.mean(0.5 * model.d * LOG_2PI + 0.5 * np.einsum("ij,ij->i", z, z) - log_det))
    flat = np.zeros(model.n_params)
    grads = model._views(flat)
    g = z / n
    g_ld = -1.0 / n
    for k in range(model.n_layers - 1, -1, -1):
        layer, b, gk = model.layers[k], model.masks[k], grads[k]
        xin, th, s, cache_s, cache_t = caches[k]
        nb = 1.0 - b
        es = np.exp(s)
        g_s = g * nb * xin * es + g_ld * nb
        g_t = g * nb
        g_x = g * b + g * nb * es
        alpha = layer["alpha"][0]
        gk["alpha"][0] += float(np.sum(g_s * th))
        g_raw = g_s * alpha * (1.0 - th * th)
        g_xm = _mlp_backward(layer, "s", cache_s, g_raw, gk)
        g_xm = g_xm + _mlp_backward(layer, "t", cache_t, g_t, gk)
        g = g_x + g_xm * b
    if not np.all(np.isfinite(flat)):
        raise NonFiniteGradient("non-finite gradient")
    return flat, loss


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    batch: int = 8
    steps: int = 2320
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_layers: int = 6
    hidden: int = 128
    alpha_init: float = 2.0


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(model: Optional[FlowModel], samples, cfg: TrainConfig = TrainConfig()):
    """Train with Adam on minibatches drawn with replacement-free shuffling.

    ``model=None`` builds an identity-initialized model from ``cfg``. The
    per-dimension standardization is fitted on ``samples``. Returns
    ``(trained model, loss trace)``; the input model is not modified.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptySamples("no training samples")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = FlowModel.initialized(x.shape[1], cfg.n_layers, cfg.hidden, cfg.alpha_init, rng)
    if x.shape[1] != model.d:
        raise DimensionMismatch(f"samples have dimension {x.shape[1]}, model expects {model.d}")
    if cfg.steps == 0:
        return model, []
    m = model.copy()
    m.mean = x.mean(axis=0)
    std = x.std(axis=0)
    m.std = np.where(std > 1e-8, std, 1.0)
    opt = Adam(m.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    order = rng.permutation(x.shape[0])
    pos = 0
    for _ in range(cfg.steps):
        if pos + cfg.batch > len(order):
            order = rng.permutation(x.shape[0])
            pos = 0
        idx = order[pos:pos + cfg.batch]
        pos += cfg.batch
        g, loss = grad_nll(m, x[idx])
        opt.step(m.theta, g)
        trace.append(loss)
    return m, trace


# ---------------------------------------------------------------------------
# serialization

def dumps(model: FlowModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, model.d, model.n_layers, model.hidden, model.alpha_init))
    for arr in (model.theta, model.mean, model.std):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> FlowModel:
    if len(raw) < _HEADER.size:
        raise ParseError(f"flow model truncated: {len(raw)} bytes")
    magic, version, d, k, hidden, alpha = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ParseError(f"not a version-{VERSION} flow model (magic {magic!r}, version {version})")
    shell = FlowModel(d, k, hidden, alpha)
    need = _HEADER.size + 8 * (shell.n_params + 2 * d)
    if len(raw) != need:
        raise ParseError(f"flow model has {len(raw)} bytes, expected {need}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    p = shell.n_params
    return FlowModel(d, k, hidden, alpha, vals[:p], vals[p:p + d], vals[p + d:])


def save(model: FlowModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> FlowModel:
    return loads(Path(path).read_bytes())


def write_trace(trace, path) -> None:
    lines = ["step,nll"] + [f"{i},{v:.17g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")
