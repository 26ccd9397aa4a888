"""Task-IL evaluation: performance matrix, forgetting metrics, bound diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ngil.exceptions import PreconditionError
from ngil.graph import GraphSnapshot, VertexBatch
from ngil.mmd import KernelConfig, mmd2_hat, subsample
from ngil.nn import (
    HeadParams,
    ModelState,
    OptState,
    adam_step,
    cross_entropy_and_grad,
    gnn_forward,
    head_forward,
    softmax,
)


class PerformanceMatrix:
    """Lower-triangular record of r[i, j] = accuracy on task j after task i.

    Indices are 1-based in the public API, matching the task numbering.
    """

    def __init__(self, m: int):
        if m < 1:
            raise ValueError("need at least one task")
        self.m = m
        self.values = np.full((m, m), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "PerformanceMatrix":
        rows = [list(r) for r in rows]
        pm = cls(len(rows))
        for i, row in enumerate(rows):
            if len(row) != i + 1:
                raise ValueError(f"row {i + 1} must have {i + 1} entries, got {len(row)}")
            for j, r in enumerate(row):
                pm[i + 1, j + 1] = r
        return pm

    def __setitem__(self, ij, value):
        i, j = ij
        if not 1 <= j <= i <= self.m:
            raise IndexError(f"r[{i},{j}] is outside the lower triangle")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.values[i - 1, j - 1] = value

    def __getitem__(self, ij):
        i, j = ij
        return float(self.values[i - 1, j - 1])

    def rows(self) -> list[list[float]]:
        return [[float(x) for x in self.values[i, : i + 1]] for i in range(self.m)]

    def is_complete(self) -> bool:
        tri = np.tril_indices(self.m)
        return bool(np.all(np.isfinite(self.values[tri])))


@dataclass
class MetricsReport:
    aps: list[float]
    afs: list[float]
    fap: float
    faf: float | None  # None when forgetting is undefined (single task, joint training)

    def to_dict(self) -> dict:
        return {
            "FAP": self.fap,
            "FAF": "N.A." if self.faf is None else self.faf,
            "APS": self.aps,
            "AFS": self.afs,
        }


def compute_metrics(matrix: PerformanceMatrix, forgetting_defined: bool = True) -> MetricsReport:
    """APS_i = mean_j r[i,j]; AFS_i = mean_j (r[i,j] - r[j,j]) for i >= 2.

    FAP is the last APS entry, FAF the last AFS entry.
    """
    if not matrix.is_complete():
        raise PreconditionError("performance matrix has missing entries")
    r = matrix.values
    m = matrix.m
    diag = np.diag(r)
    aps = [float(np.mean(r[i, : i + 1])) for i in range(m)]
    afs = [float(np.mean(r[i, : i + 1] - diag[: i + 1])) for i in range(1, m)]
    faf = afs[-1] if (afs and forgetting_defined) else None
    return MetricsReport(aps=aps, afs=afs, fap=aps[-1], faf=faf)


def predict_logits(model: ModelState, snapshot: GraphSnapshot, task: int, vertices) -> np.ndarray:
    emb = gnn_forward(model.encoder, snapshot, vertices)
    return head_forward(model.heads, task, emb)


def evaluate_accuracy(model: ModelState, snapshot: GraphSnapshot, task: int, vertices, labels) -> float:
    """Fraction of argmax-correct predictions; ties go to the lower class id."""
    vertices = np.asarray(vertices, dtype=np.int64)
    if len(vertices) == 0:
        raise PreconditionError(f"task {task}: empty evaluation set")
    pred = np.argmax(predict_logits(model, snapshot, task, vertices), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def lq_risk(probs, labels, q: float = 1.0) -> float:
    """Mean over vertices and classes of ``|p_c - onehot_c|^q``.

    For two classes this is ``|p_1 - y|^q``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(probs.shape[1])[np.asarray(labels)]
    return float(np.mean(np.abs(probs - onehot) ** q))


def train_linear_head(Z, labels, n_classes=2, steps=500, lr=0.05, seed=0):
    """Fit a fresh affine softmax head on fixed embeddings."""
    heads = HeadParams()
    heads.add(0, Z.shape[1], n_classes, seed=seed)
    params = heads.named()
    opt = OptState(lr=lr)
    for _ in range(steps):
        logits = Z @ params["head0.W"] + params["head0.b"]
        _, d = cross_entropy_and_grad(logits, labels)
        adam_step(params, {"head0.W": Z.T @ d, "head0.b": d.sum(0)}, opt)
    return heads


@dataclass
class BoundDiagnostics:
    """Terms of the latent-space forgetting bound for a two-task run.

    ``lambda_hat`` is a proxy: summed empirical risks of a head fitted on
    pooled data over the frozen encoder, not the true minimum over heads.
    """

    q: float
    new_task_risk: float
    mmd_drift: float
    mmd_crosstask: float
    lambda_hat: float | None
    observed_cfr: float

    @property
    def rhs(self) -> float | None:
        if self.lambda_hat is None:
            return None
        return self.new_task_risk + 2.0 * self.mmd_drift + self.mmd_crosstask + self.lambda_hat

    @property
    def gap(self) -> float | None:
        """RHS minus observed forgetting risk; negative means a violation."""
        rhs = self.rhs
        return None if rhs is None else rhs - self.observed_cfr

    @property
    def holds(self) -> bool | None:
        gap = self.gap
        return None if gap is None else gap >= 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_hat"] = "unavailable" if self.lambda_hat is None else self.lambda_hat
        d["rhs"] = "unavailable" if self.rhs is None else self.rhs
        d["gap"] = "unavailable" if self.gap is None else self.gap
        return d


def latent_mmd(X, Y, kernel, cap, seed):
    if cap is not None:
        if len(X) > cap:
            X = subsample(X, cap, [seed, 1])
        if len(Y) > cap:
            Y = subsample(Y, cap, [seed, 2])
    return math.sqrt(max(mmd2_hat(X, Y, kernel), 0.0))


def bound_components(
    model: ModelState,
    snapshots: tuple[GraphSnapshot, GraphSnapshot],
    batches: tuple[VertexBatch, VertexBatch],
    q: float = 1.0,
    kernel: KernelConfig = KernelConfig(),
    seed: int = 0,
    reference_head: bool = True,
    sample_cap: int | None = 1024,
) -> BoundDiagnostics:
    """Latent-space bound terms after training on tasks 1 and 2.

    MMD terms use every vertex of each batch; risks use test splits.  The
    drift term compares V1 embedded in snapshot 1 and snapshot 2; the
    cross-task term compares V1 in snapshot 1 with V2 in snapshot 2.
    """
    s1, s2 = snapshots
    b1, b2 = batches
    t1, t2 = b1.task_index, b2.task_index
    for t in (t1, t2):
        if t not in model.heads:
            raise PreconditionError(f"bound diagnostics need a trained head for task {t}")
    enc = model.encoder
    z11 = gnn_forward(enc, s1, b1.vertices)
    z12 = gnn_forward(enc, s2, b1.vertices)
    z22 = gnn_forward(enc, s2, b2.vertices)
    drift = latent_mmd(z11, z12, kernel, sample_cap, [seed, 11])
    cross = latent_mmd(z11, z22, kernel, sample_cap, [seed, 12])

    v1, y1 = b1.test()
    v2, y2 = b2.test()
    e1 = gnn_forward(enc, s2, v1)
    e2 = gnn_forward(enc, s2, v2)
    cfr = lq_risk(softmax(head_forward(model.heads, t1, e1)), y1, q)
    new_risk = lq_risk(softmax(head_forward(model.heads, t2, e2)), y2, q)

    lam = None
    if reference_head:
        tv1, ty1 = b1.train()
        tv2, ty2 = b2.train()
        Z = np.vstack([gnn_forward(enc, s2, tv1), gnn_forward(enc, s2, tv2)])
        ref = train_linear_head(Z, np.concatenate([ty1, ty2]), seed=seed)
        lam = lq_risk(softmax(head_forward(ref, 0, e1)), y1, q) + lq_risk(
            softmax(head_forward(ref, 0, e2)), y2, q
        )
    return BoundDiagnostics(
        q=q,
        new_task_risk=new_risk,
        mmd_drift=drift,
        mmd_crosstask=cross,
        lambda_hat=lam,
        observed_cfr=cfr,
    )


def permutation_null(X, Y, kernel: KernelConfig = KernelConfig(), n_perm: int = 200, seed=0) -> np.ndarray:
    """MMD (not squared) of random relabelings of the pooled samples."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    pooled = np.vstack([X, Y])
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for k in range(n_perm):
        perm = rng.permutation(len(pooled))
        out[k] = math.sqrt(max(mmd2_hat(pooled[perm[: len(X)]], pooled[perm[len(X) :]], kernel), 0.0))
    return out


def bootstrap_band(X, Y, kernel: KernelConfig = KernelConfig(), n_boot: int = 200, seed=0, level=0.95):
    """Percentile band of MMD under resampling each set with replacement."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    rng = np.random.default_rng(seed)
    vals = np.empty(n_boot)
    for k in range(n_boot):
        xi = rng.integers(0, len(X), len(X))
        yi = rng.integers(0, len(Y), len(Y))
        vals[k] = math.sqrt(max(mmd2_hat(X[xi], Y[yi], kernel), 0.0))
    lo, hi = np.quantile(vals, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)
