"""GCN + GRU graph autoencoder with an inner-product edge decoder.

Parameters live in one flat float64 vector so the federation code can treat
a model as a point in R^d.  The vector is split into named segments:

* ``ENC``  -- ``W1 (d_x, d_h)`` and ``W2 (d_h, d_z)`` of the two-layer GCN
* ``TEMP`` -- GRU weights ``W*, U* (d_z, d_z)`` and biases ``b* (d_z,)`` for the
  update (z), reset (r) and candidate (h) paths
* ``DEC``  -- empty; the inner-product decoder has no weights

Gradients are derived by hand and checked against finite differences in the
test-suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .graph import Snapshot

SEGMENTS = ("ENC", "TEMP", "DEC")
_GATES = ("z", "r", "h")
CLAMP = 1e-7


class NumericOverflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d_x: int
    d_h: int = 16
    d_z: int = 8

    def __post_init__(self):
        if min(self.d_x, self.d_h, self.d_z) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {self}")


def _layout(dims: ModelDims) -> dict[str, tuple[str, int, tuple[int, ...]]]:
    """name -> (segment, offset, shape), in storage order."""
    shapes: list[tuple[str, str, tuple[int, ...]]] = [
        ("ENC", "W1", (dims.d_x, dims.d_h)),
        ("ENC", "W2", (dims.d_h, dims.d_z)),
    ]
    for g in _GATES:
        shapes += [
            ("TEMP", f"W{g}", (dims.d_z, dims.d_z)),
            ("TEMP", f"U{g}", (dims.d_z, dims.d_z)),
            ("TEMP", f"b{g}", (dims.d_z,)),
        ]
    out = {}
    offset = 0
    for seg, name, shape in shapes:
        out[name] = (seg, offset, shape)
        offset += int(np.prod(shape))
    return out


def n_params(dims: ModelDims) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in _layout(dims).values())


@dataclass
class ModelParams:
    """A flat parameter vector plus the layout needed to read it."""

    flat: np.ndarray
    dims: ModelDims

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (n_params(self.dims),):
            raise ValueError(f"expected {n_params(self.dims)} parameters, got {self.flat.shape}")

    @property
    def segments(self) -> dict[str, slice]:
        bounds: dict[str, list[int]] = {}
        for seg, off, shape in _layout(self.dims).values():
            lo, hi = bounds.get(seg, [off, off])
            bounds[seg] = [min(lo, off), max(hi, off + int(np.prod(shape)))]
        end = len(self.flat)
        out = {seg: slice(*bounds[seg]) for seg in ("ENC", "TEMP")}
        out["DEC"] = slice(end, end)
        return out

    def segment(self, name: str) -> np.ndarray:
        return self.flat[self.segments[name]]

    def unpack(self) -> dict[str, np.ndarray]:
        """Named views into ``flat`` (writes go through)."""
        return {
            name: self.flat[off : off + int(np.prod(shape))].reshape(shape)
            for name, (_, off, shape) in _layout(self.dims).items()
        }

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.dims)

    def replace(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(np.array(flat, dtype=np.float64), self.dims)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def __len__(self) -> int:
        return len(self.flat)


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(n_params(dims))
    for name, (_, off, shape) in _layout(dims).items():
        if len(shape) == 1:
            continue
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        size = int(np.prod(shape))
        flat[off : off + size] = rng.uniform(-bound, bound, size)
    return ModelParams(flat, dims)


def glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 1:
        return 0.0
    return float(np.sqrt(6.0 / (shape[0] + shape[1])))


def save_params(params: ModelParams, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` (manifest)."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    manifest = path.with_suffix(".json")
    blob.write_bytes(params.flat.astype("<f8").tobytes())
    layout = _layout(params.dims)
    doc = {
        "dtype": "<f8",
        "length": len(params.flat),
        "dims": {"d_x": params.dims.d_x, "d_h": params.dims.d_h, "d_z": params.dims.d_z},
        "segments": {
            seg: {"offset": sl.start, "length": sl.stop - sl.start} for seg, sl in params.segments.items()
        },
        "tensors": {name: {"segment": seg, "offset": off, "shape": list(shape)} for name, (seg, off, shape) in layout.items()},
    }
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return blob, manifest


def load_params(path: str | Path) -> ModelParams:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    if len(flat) != doc["length"]:
        raise ValueError(f"blob holds {len(flat)} values, manifest says {doc['length']}")
    return ModelParams(flat, ModelDims(**doc["dims"]))


# --------------------------------------------------------------------------
# forward pieces


def normalize_adjacency(snap: Snapshot, node_order: Sequence[int]) -> np.ndarray:
    """Symmetric renormalisation ``D^-1/2 (A + I) D^-1/2``.

    ``A`` is the weighted adjacency symmetrised as ``A + A.T`` (so a pair seen
    in both directions carries both counts); self-loop weights land on the
    diagonal on top of the identity.
    """
    index = {v: i for i, v in enumerate(node_order)}
    missing = [v for v in snap.nodes if v not in index]
    if missing:
        raise ValueError(f"node_order misses snapshot nodes {sorted(missing)[:5]}")
    n = len(node_order)
    A = np.zeros((n, n))
    for (u, v), w in snap.edges.items():
        i, j = index[u], index[v]
        if i == j:
            A[i, i] += w
        else:
            A[i, j] += w
            A[j, i] += w
    A += np.eye(n)
    d = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return A * inv_sqrt[:, None] * inv_sqrt[None, :]


def encode(params: ModelParams, X: np.ndarray, A_hat: np.ndarray) -> np.ndarray:
    """Two-layer GCN: ``A_hat @ relu(A_hat @ X @ W1) @ W2``."""
    p = params.unpack()
    if X.shape[1] != params.dims.d_x:
        raise ValueError(f"X has {X.shape[1]} features, model expects {params.dims.d_x}")
    if A_hat.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"A_hat shape {A_hat.shape} does not match {X.shape[0]} nodes")
    return A_hat @ np.maximum(A_hat @ X @ p["W1"], 0.0) @ p["W2"]


def _gru_step(p, x, h):
    z = expit(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
    r = expit(x @ p["Wr"] + h @ p["Ur"] + p["br"])
    rh = r * h
    c = np.tanh(x @ p["Wh"] + rh @ p["Uh"] + p["bh"])
    h_new = (1.0 - z) * c + z * h
    return h_new, (x, h, z, r, rh, c)


def temporal(params: ModelParams, Zs: Sequence[np.ndarray], h0: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-node GRU over the encoder outputs; returns the hidden state per step."""
    p = params.unpack()
    if not Zs:
        return []
    h = np.zeros_like(Zs[0]) if h0 is None else h0
    out = []
    for x in Zs:
        h, _ = _gru_step(p, x, h)
        out.append(h)
    return out


def decode(Z: np.ndarray, edges) -> np.ndarray:
    """Edge probabilities ``sigmoid(<z_u, z_v>)``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return expit(np.einsum("ij,ij->i", Z[edges[:, 0]], Z[edges[:, 1]]))


# --------------------------------------------------------------------------
# batches


def negative_sample(snap: Snapshot, ratio: float = 1.0, seed: int = 0, *, count: int | None = None) -> list[tuple[int, int]]:
    """Uniform node pairs of ``snap`` that are neither edges nor self-loops.

    ``count`` defaults to ``round(ratio * #edges)``.  Pairs may repeat.
    """
    nodes = sorted(snap.nodes)
    if len(nodes) < 2:
        raise ValueError("negative sampling needs at least two nodes")
    if count is None:
        count = int(round(ratio * len(snap.edges)))
    if count == 0:
        return []
    taken = snap.undirected_pairs()
    n = len(nodes)
    free = n * (n - 1) // 2 - sum(1 for u, v in taken if u != v)
    if free <= 0:
        raise ValueError("graph too dense to sample negatives")
    rng = np.random.default_rng(seed)
    out: list[tuple[int, int]] = []
    attempts = 0
    cap = 100 * count
    while len(out) < count:
        attempts += 1
        if attempts > cap:
            raise ValueError("graph too dense to sample negatives")
        i, j = rng.integers(n, size=2)
        if i == j:
            continue
        u, v = nodes[i], nodes[j]
        if (min(u, v), max(u, v)) in taken:
            continue
        out.append((u, v))
    return out


@dataclass
class SnapshotTensors:
    """One time step: inputs ``X``/``A_hat`` and index-space target pairs."""

    X: np.ndarray
    A_hat: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    AX: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.int64).reshape(-1, 2)
        self.neg = np.asarray(self.neg, dtype=np.int64).reshape(-1, 2)
        self.AX = self.A_hat @ self.X


@dataclass
class TrainBatch:
    """A run of consecutive snapshots.

    The embedding at step ``t`` is scored against the targets of step
    ``t + offset``; steps without a target contribute no loss.
    """

    steps: list[SnapshotTensors]
    offset: int = 0
    h0: np.ndarray | None = None

    def __post_init__(self):
        if self.offset not in (0, 1):
            raise ValueError("prediction offset must be 0 or 1")

    @property
    def n_nodes(self) -> int:
        return self.steps[0].X.shape[0]

    def window(self, t: int, h0: np.ndarray | None) -> "TrainBatch":
        return TrainBatch(self.steps[t : t + 1 + self.offset], self.offset, h0)


class ClientSequence:
    """A client's snapshots aligned to one node order, ready for training.

    Negatives are redrawn per call to :meth:`make_batch`.
    """

    def __init__(
        self,
        snapshots: Sequence[Snapshot],
        node_order: Sequence[int],
        features: np.ndarray,
        *,
        neg_ratio: float = 1.0,
        offset: int = 0,
    ):
        self.snapshots = list(snapshots)
        self.node_order = list(node_order)
        self.index = {v: i for i, v in enumerate(self.node_order)}
        self.features = np.asarray(features, dtype=np.float64)
        self.neg_ratio = neg_ratio
        self.offset = offset
        self._inputs: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for snap in self.snapshots:
            X = np.zeros_like(self.features)
            present = [self.index[v] for v in snap.nodes]
            X[present] = self.features[present]
            A_hat = normalize_adjacency(snap, self.node_order)
            pos = np.array(sorted({tuple(sorted((self.index[u], self.index[v]))) for u, v in snap.edges}), dtype=np.int64)
            self._inputs.append((X, A_hat, pos))

    def __len__(self) -> int:
        return len(self.snapshots)

    def to_index(self, pairs) -> np.ndarray:
        return np.array([(self.index[u], self.index[v]) for u, v in pairs], dtype=np.int64).reshape(-1, 2)

    def make_batch(self, seed: int = 0, targets: Sequence[int] | None = None) -> TrainBatch:
        """All snapshots as one batch; only steps in ``targets`` (default all)
        carry positives and freshly drawn negatives."""
        targets = set(range(len(self)) if targets is None else targets)
        ss = np.random.SeedSequence(seed)
        out = []
        for t, child in enumerate(ss.spawn(len(self))):
            X, A_hat, pos = self._inputs[t]
            snap = self.snapshots[t]
            if t not in targets:
                pos, neg = [], []
            elif len(snap.nodes) >= 2 and len(snap.edges):
                try:
                    neg = negative_sample(snap, self.neg_ratio, int(child.generate_state(1)[0]))
                except ValueError:
                    # saturated snapshot: train it on positives only
                    neg = []
            else:
                neg = []
            out.append(SnapshotTensors(X, A_hat, pos, self.to_index(neg)))
        return TrainBatch(out, self.offset)

    def embeddings(self, params: ModelParams, upto: int | None = None) -> list[np.ndarray]:
        """Hidden states for snapshots ``0..upto-1`` (all by default)."""
        upto = len(self) if upto is None else upto
        Zs = [encode(params, X, A_hat) for X, A_hat, _ in self._inputs[:upto]]
        return temporal(params, Zs)


# --------------------------------------------------------------------------
# loss and gradient


def _bce(scores: np.ndarray, target: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-term loss and d(loss)/d(logit); clamped terms get zero slope."""
    s = np.clip(scores, CLAMP, 1.0 - CLAMP)
    loss = -np.log(s) if target == 1.0 else -np.log1p(-s)
    slope = np.where((scores > CLAMP) & (scores < 1.0 - CLAMP), scores - target, 0.0)
    return loss, slope


def _forward_backward(flat: np.ndarray, dims: ModelDims, batch: TrainBatch, need_grad: bool = True):
    # non-finite values are detected explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_backward_raw(flat, dims, batch, need_grad)


def _forward_backward_raw(flat: np.ndarray, dims: ModelDims, batch: TrainBatch, need_grad: bool):
    params = ModelParams(flat, dims)
    p = params.unpack()
    T = len(batch.steps)
    n = batch.n_nodes
    h = np.zeros((n, dims.d_z)) if batch.h0 is None else batch.h0

    caches = []
    hs = []
    for step in batch.steps:
        P = step.AX @ p["W1"]
        H1 = np.maximum(P, 0.0)
        Q = step.A_hat @ H1
        Zp = Q @ p["W2"]
        h, gcache = _gru_step(p, Zp, h)
        caches.append((P, Q, gcache))
        hs.append(h)

    loss = 0.0
    dH = [np.zeros((n, dims.d_z)) for _ in range(T)]
    for t in range(T - batch.offset):
        target = batch.steps[t + batch.offset]
        Z = hs[t]
        n_terms = len(target.pos) + len(target.neg)
        if n_terms == 0:
            continue
        for pairs, y in ((target.pos, 1.0), (target.neg, 0.0)):
            if len(pairs) == 0:
                continue
            zu, zv = Z[pairs[:, 0]], Z[pairs[:, 1]]
            scores = expit(np.einsum("ij,ij->i", zu, zv))
            terms, slope = _bce(scores, y)
            loss += terms.sum() / n_terms
            if need_grad:
                g = (slope / n_terms)[:, None]
                np.add.at(dH[t], pairs[:, 0], g * zv)
                np.add.at(dH[t], pairs[:, 1], g * zu)

    if not np.isfinite(loss):
        raise NumericOverflowError("numeric overflow")
    if not need_grad:
        return loss, None, hs

    grad = ModelParams(np.zeros_like(flat), dims)
    g = grad.unpack()
    dh_next = np.zeros((n, dims.d_z))
    for t in reversed(range(T)):
        P, Q, (x, h_prev, z, r, rh, c) = caches[t]
        dh = dH[t] + dh_next
        dc = dh * (1.0 - z)
        dz = dh * (h_prev - c)
        dh_prev = dh * z

        dah = dc * (1.0 - c * c)
        g["Wh"] += x.T @ dah
        g["Uh"] += rh.T @ dah
        g["bh"] += dah.sum(axis=0)
        dx = dah @ p["Wh"].T
        drh = dah @ p["Uh"].T
        dh_prev += drh * r
        dar = drh * h_prev * r * (1.0 - r)
        g["Wr"] += x.T @ dar
        g["Ur"] += h_prev.T @ dar
        g["br"] += dar.sum(axis=0)
        dx += dar @ p["Wr"].T
        dh_prev += dar @ p["Ur"].T

        daz = dz * z * (1.0 - z)
        g["Wz"] += x.T @ daz
        g["Uz"] += h_prev.T @ daz
        g["bz"] += daz.sum(axis=0)
        dx += daz @ p["Wz"].T
        dh_prev += daz @ p["Uz"].T
        dh_next = dh_prev

        step = batch.steps[t]
        g["W2"] += Q.T @ dx
        dQ = dx @ p["W2"].T
        dP = (step.A_hat.T @ dQ) * (P > 0)
        g["W1"] += step.AX.T @ dP

    if not np.all(np.isfinite(grad.flat)):
        raise NumericOverflowError("numeric overflow")
    return loss, grad.flat, hs


@dataclass(frozen=True)
class Proximal:
    """FedProx term ``mu/2 * ||w - anchor||^2``."""

    mu: float
    anchor: np.ndarray


def loss_and_grad(params: ModelParams, batch: TrainBatch, prox: Proximal | None = None) -> tuple[float, np.ndarray]:
    """Summed per-snapshot mean BCE and its exact gradient w.r.t. ``params.flat``."""
    loss, grad, _ = _forward_backward(params.flat, params.dims, batch)
    if prox is not None and prox.mu:
        diff = params.flat - prox.anchor
        loss += 0.5 * prox.mu * float(diff @ diff)
        grad = grad + prox.mu * diff
    return float(loss), grad


def batch_loss(params: ModelParams, batch: TrainBatch) -> float:
    loss, _, _ = _forward_backward(params.flat, params.dims, batch, need_grad=False)
    return float(loss)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(w)
            self.v = np.zeros_like(w)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


BatchSource = TrainBatch | ClientSequence | Callable[[int], TrainBatch]


def _draw(data: BatchSource, seed: int) -> TrainBatch:
    if isinstance(data, TrainBatch):
        return data
    if isinstance(data, ClientSequence):
        return data.make_batch(seed)
    return data(seed)


def local_train(
    params: ModelParams,
    data: BatchSource,
    E: int = 1,
    eta: float = 0.01,
    prox: Proximal | None = None,
    seed: int = 0,
    *,
    step_unit: str = "snapshot",
) -> ModelParams:
    """``E`` epochs of Adam on one client's data, starting from ``params``.

    ``step_unit="snapshot"`` takes one optimiser step per snapshot, carrying
    the GRU state forward between steps (truncated backpropagation through
    time).  ``step_unit="sequence"`` takes one step per epoch on the loss of
    the whole sequence.  A fresh optimiser is used on every call.
    """
    if E < 1:
        raise ValueError("E must be >= 1")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if step_unit not in ("snapshot", "sequence"):
        raise ValueError(f"unknown step_unit {step_unit!r}")
    rng = np.random.default_rng(seed)
    opt = Adam(eta)
    w = params.flat.copy()
    dims = params.dims

    def grad_at(w_, b):
        loss, grad, hs = _forward_backward(w_, dims, b)
        if prox is not None and prox.mu:
            grad = grad + prox.mu * (w_ - prox.anchor)
        return grad, hs

    for _ in range(E):
        batch = _draw(data, int(rng.integers(2**63 - 1)))
        if step_unit == "sequence":
            grad, _ = grad_at(w, batch)
            w = opt.step(w, grad)
            continue
        h = batch.h0
        for t in range(len(batch.steps) - batch.offset):
            grad, hs = grad_at(w, batch.window(t, h))
            w = opt.step(w, grad)
            h = hs[0]
    if not np.all(np.isfinite(w)):
        raise NumericOverflowError("numeric overflow")
    return ModelParams(w, dims)
