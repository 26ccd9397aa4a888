"""Mean-aggregation GNN encoder, per-task linear heads, Adam, gradient checks.

Layer ``l`` computes::

    h_v^{l+1} = act(W_l^T mean{h_u^l : u in N(v) + {v}} + b_l)

Only the ``L``-hop ball around the requested targets is ever touched, so the
encoder is local by construction.  Parameters live in plain dicts of arrays
keyed ``enc.W0``, ``enc.b0``, ..., ``head3.W``, ``head3.b`` so the optimizer
and gradient checker can treat every parameter uniformly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from ngil.exceptions import DivergenceError, VertexNotFoundError
from ngil.graph import GraphSnapshot, hop_distances

ACTIVATIONS = ("relu", "tanh", "identity")


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GnnParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @classmethod
    def init(cls, in_dim, hidden=64, layers=2, activation="relu", seed=0) -> "GnnParams":
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * layers
        return cls(
            weights=[glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])],
            biases=[np.zeros(b) for b in dims[1:]],
            activation=activation,
        )

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc.W{i}"] = w
            out[f"enc.b{i}"] = b
        return out


@dataclass
class HeadParams:
    """One affine map per task index, embedding -> task class logits."""

    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, task: int, emb_dim: int, n_classes: int = 2, seed=0):
        rng = np.random.default_rng(seed)
        self.weights[task] = glorot(rng, emb_dim, n_classes)
        self.biases[task] = np.zeros(n_classes)

    def __contains__(self, task):
        return task in self.weights

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for t in sorted(self.weights):
            out[f"head{t}.W"] = self.weights[t]
            out[f"head{t}.b"] = self.biases[t]
        return out


@dataclass
class ModelState:
    encoder: GnnParams
    heads: HeadParams = field(default_factory=HeadParams)
    horizon: int = 0

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array."""
        return {**self.encoder.named(), **self.heads.named()}

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


class GraphContext:
    """Precomputed local aggregation operators for a fixed target set.

    Layer ``l`` of an ``L``-layer encoder only needs outputs within
    ``L-1-l`` hops of the targets, so operator ``l`` maps rows on that ball
    from inputs on the ball one hop wider.  The last operator's rows are the
    targets themselves, in the order given.
    """

    def __init__(self, snapshot: GraphSnapshot, targets, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        targets = np.asarray(targets, dtype=np.int64)
        tpos = snapshot.positions(targets)
        dist = hop_distances(snapshot, tpos, depth)
        ball = np.flatnonzero(dist >= 0)
        adj = snapshot.adjacency[ball][:, ball]
        S = (adj + sp.identity(len(ball), format="csr")).tocsr()
        S.sort_indices()
        inv = 1.0 / np.asarray(S.sum(axis=1)).ravel()
        local = dist[ball]
        self.targets = targets
        self.ball_ids = snapshot.vertex_ids[ball]
        self.features = snapshot.features[ball]
        self.depth = depth
        self.ops = []
        cols = np.arange(len(ball))
        for l in range(depth):
            if l == depth - 1:
                rows = np.searchsorted(ball, tpos)
            else:
                rows = np.flatnonzero(local <= depth - 1 - l)
            self.ops.append((S[rows][:, cols].tocsr(), inv[rows]))
            cols = rows
        # raw features never change, so the first aggregation is computed once
        self.first = self.aggregate(0, self.features)

    def aggregate(self, layer, H):
        op, inv = self.ops[layer]
        return (op @ H) * inv[:, None]

    def aggregate_transpose(self, layer, G):
        op, inv = self.ops[layer]
        return op.T @ (G * inv[:, None])


def _act(name, Z):
    if name == "relu":
        return np.maximum(Z, 0.0)
    if name == "tanh":
        return np.tanh(Z)
    return Z


def _act_grad(name, Z, H):
    if name == "relu":
        return (Z > 0).astype(Z.dtype)
    if name == "tanh":
        return 1.0 - H * H
    return np.ones_like(Z)


class EncoderPass:
    """One forward pass of the encoder, keeping what backward needs."""

    def __init__(self, params: GnnParams, ctx: GraphContext):
        if ctx.features.shape[1] != params.weights[0].shape[0]:
            raise ValueError(
                f"feature dim {ctx.features.shape[1]} does not match layer 0 input "
                f"{params.weights[0].shape[0]}"
            )
        if ctx.depth != params.depth:
            raise ValueError(f"graph context depth {ctx.depth} does not match encoder depth {params.depth}")
        self.params = params
        self.ctx = ctx
        H = ctx.features
        self.M, self.Z, self.H = [], [], [H]
        for l, (W, b) in enumerate(zip(params.weights, params.biases)):
            M = ctx.first if l == 0 else ctx.aggregate(l, H)
            Z = M @ W + b
            H = _act(params.activation, Z)
            self.M.append(M)
            self.Z.append(Z)
            self.H.append(H)
        self.embeddings = H

    def backward(self, grad_embeddings) -> dict[str, np.ndarray]:
        p, ctx = self.params, self.ctx
        dH = np.asarray(grad_embeddings, dtype=np.float64)
        grads = {}
        for l in reversed(range(p.depth)):
            dZ = dH * _act_grad(p.activation, self.Z[l], self.H[l + 1])
            grads[f"enc.W{l}"] = self.M[l].T @ dZ
            grads[f"enc.b{l}"] = dZ.sum(axis=0)
            if l:
                dH = ctx.aggregate_transpose(l, dZ @ p.weights[l].T)
        return grads


def gnn_forward(params: GnnParams, snapshot: GraphSnapshot, targets) -> np.ndarray:
    """Embeddings of ``targets`` (rows in the given order)."""
    return EncoderPass(params, GraphContext(snapshot, targets, params.depth)).embeddings


def head_forward(heads: HeadParams, task: int, embeddings) -> np.ndarray:
    if task not in heads:
        raise VertexNotFoundError(f"no prediction head for task {task}")
    W, b = heads.weights[task], heads.biases[task]
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != W.shape[0]:
        raise ValueError(f"embedding dim does not match head {task}")
    return embeddings @ W + b


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels) -> float:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    loss, _ = cross_entropy_and_grad(logits, labels)
    return loss


def cross_entropy_and_grad(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (n, c) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label id out of range for class count")
    n = len(labels)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


@dataclass
class OptState:
    """Adam moments and hyperparameters."""

    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState):
    """Update ``params`` in place from ``grads``; keys absent from ``grads`` are left alone.

    Returns ``(params, opt)``.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {params[k].shape}")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for k, g in grads.items():
        m = opt.m.setdefault(k, np.zeros_like(g))
        v = opt.v.setdefault(k, np.zeros_like(g))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        params[k] -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    objective: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 200,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``objective``.

    ``objective`` is called with ``params`` after in-place perturbation of one
    coordinate at a time; every array is restored afterwards.  When more than
    ``max_coords`` coordinates exist a uniform sample of that size is checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    coordinates whose gradient vanishes from dividing round-off by zero.
    """
    coords = [(k, idx) for k in sorted(analytic) for idx in np.ndindex(params[k].shape)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    worst, worst_err = None, 0.0
    for k, idx in coords:
        arr = params[k]
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = objective(params)
        arr[idx] = orig - eps
        fm = objective(params)
        arr[idx] = orig
        num = (fp - fm) / (2 * eps)
        a = float(analytic[k][idx])
        err = abs(a - num) / max(abs(a), abs(num), floor)
        if err > worst_err or worst is None:
            worst, worst_err = (k, tuple(int(i) for i in idx)), err
    return GradCheckReport(worst_err, worst, len(coords), tolerance)
