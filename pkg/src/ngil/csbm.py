"""Contextual stochastic block model with a per-batch community schedule.

Community 1 carries local label 0 and community 2 local label 1.  Batch ``t``
(1-based) is a two-class task over dataset classes ``(2t-2, 2t-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ngil.exceptions import DegenerateInputError, PreconditionError
from ngil.graph import GraphSnapshot, VertexBatch, accumulate_snapshot


@dataclass
class CSBMParams:
    mu1: np.ndarray
    mu2: np.ndarray
    p_in: float
    p_out: float
    batch_plan: list[tuple[int, int]]
    sigma: float = 1.0
    # optional per-batch (mu1, mu2) overriding the shared means
    task_means: list[tuple[np.ndarray, np.ndarray]] | None = None
    allow_heterophily: bool = False

    def __post_init__(self):
        self.mu1 = np.atleast_1d(np.asarray(self.mu1, dtype=np.float64))
        self.mu2 = np.atleast_1d(np.asarray(self.mu2, dtype=np.float64))
        self.batch_plan = [(int(a), int(b)) for a, b in self.batch_plan]
        if self.task_means is not None:
            self.task_means = [
                (np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float)))
                for a, b in self.task_means
            ]
        self.validate()

    @property
    def dim(self) -> int:
        return len(self.mu1)

    def validate(self):
        if not self.batch_plan:
            raise ValueError("batch_plan must be nonempty")
        if any(a < 0 or b < 0 or a + b == 0 for a, b in self.batch_plan):
            raise ValueError("each batch needs nonnegative counts and at least one vertex")
        for p in (self.p_in, self.p_out):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"edge probability {p} outside [0, 1]")
        if self.p_out > self.p_in and not self.allow_heterophily:
            raise ValueError("p_out > p_in requires allow_heterophily=True")
        if self.mu1.shape != self.mu2.shape:
            raise ValueError("mu1 and mu2 must have the same dimension")
        if np.array_equal(self.mu1, self.mu2) and self.task_means is None:
            raise ValueError("community means must differ in at least one coordinate")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.task_means is not None:
            if len(self.task_means) != len(self.batch_plan):
                raise ValueError("task_means needs one (mu1, mu2) pair per batch")
            for a, b in self.task_means:
                if a.shape != self.mu1.shape or b.shape != self.mu1.shape:
                    raise ValueError("task means must match the feature dimension")

    def means(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Community means for 0-based batch ``t``."""
        if self.task_means is None:
            return self.mu1, self.mu2
        return self.task_means[t]


@dataclass
class CSBMSequence:
    """Output of :func:`generate_csbm`; iterates as ``(batch, snapshot)`` pairs."""

    batches: list[VertexBatch]
    snapshots: list[GraphSnapshot]
    new_edges: list[np.ndarray] = field(default_factory=list)

    def __iter__(self):
        return iter(zip(self.batches, self.snapshots))

    def __len__(self):
        return len(self.batches)

    def __getitem__(self, i):
        return self.batches[i], self.snapshots[i]

    def intra_batch_edge_count(self, t: int) -> int:
        """Edges with both endpoints in 0-based batch ``t``, from the generation log."""
        verts = self.batches[t].vertices
        lo, hi = verts.min(), verts.max()
        e = self.new_edges[t]
        return int(np.sum((e >= lo).all(axis=1) & (e <= hi).all(axis=1)))


def _sample_batch(rng, params: CSBMParams, t: int, n_old: int, comm_old: np.ndarray):
    c1, c2 = params.batch_plan[t]
    comm = np.concatenate([np.zeros(c1, np.int64), np.ones(c2, np.int64)])
    m1, m2 = params.means(t)
    means = np.where(comm[:, None] == 0, m1, m2)
    feats = means + params.sigma * rng.standard_normal((len(comm), params.dim))

    nb = len(comm)
    iu, ju = np.triu_indices(nb, k=1)
    p_within = np.where(comm[iu] == comm[ju], params.p_in, params.p_out)
    keep = rng.random(len(iu)) < p_within
    within = np.column_stack([iu[keep], ju[keep]]) + n_old

    if n_old:
        p_cross = np.where(comm[:, None] == comm_old[None, :], params.p_in, params.p_out)
        hit = rng.random((nb, n_old)) < p_cross
        new_i, old_j = np.nonzero(hit)
        cross = np.column_stack([old_j, new_i + n_old])
    else:
        cross = np.zeros((0, 2), np.int64)
    return comm, feats, np.concatenate([within, cross]).astype(np.int64)


def generate_csbm(params: CSBMParams, seed: int) -> CSBMSequence:
    """Sample an evolving CSBM graph, one snapshot per batch of the plan.

    Every candidate pair with at least one endpoint in the newest batch is an
    edge independently with probability ``p_in`` (same community) or
    ``p_out``.  Within the first batch all pairs are candidates.
    """
    rng = np.random.default_rng(seed)
    snap = GraphSnapshot.empty(params.dim)
    comm_all = np.zeros(0, np.int64)
    out = CSBMSequence([], [], [])
    for t in range(len(params.batch_plan)):
        n_old = snap.num_vertices
        comm, feats, edges = _sample_batch(rng, params, t, n_old, comm_all)
        batch = VertexBatch(
            task_index=t + 1,
            vertices=np.arange(n_old, n_old + len(comm)),
            labels=comm,
            classes=(2 * t, 2 * t + 1),
        )
        snap = accumulate_snapshot(snap, batch, edges, feats)
        comm_all = np.concatenate([comm_all, comm])
        out.batches.append(batch)
        out.snapshots.append(snap)
        out.new_edges.append(edges)
    return out


def shifted_sequence_params(
    n_tasks: int = 20,
    batch_size: int = 100,
    imbalance: float = 0.8,
    dim: int = 8,
    gap: float = 4.0,
    spread: float = 2.0,
    p_in: float = 0.03,
    p_out: float = 0.015,
    sigma: float = 1.0,
    seed: int = 0,
    orientation: str = "alternating",
) -> CSBMParams:
    """A multi-task CSBM whose community ratio alternates between batches.

    Odd batches hold ``imbalance`` community-1 vertices, even batches the
    reverse.  Each batch gets its own pair of community means: a centre drawn
    from N(0, spread^2 I) and the two means ``gap`` apart along a unit
    direction, so every task is separable but tasks occupy different regions
    of feature space.  With ``orientation="random"`` each batch draws its own
    direction; with ``"alternating"`` all batches share one direction whose
    sign flips from batch to batch, so a community's features in one task
    resemble the other community of the previous task.
    """
    if orientation not in ("random", "alternating"):
        raise ValueError("orientation must be 'random' or 'alternating'")
    rng = np.random.default_rng([seed, 7919])
    major = int(round(imbalance * batch_size))
    plan = [
        (major, batch_size - major) if t % 2 == 0 else (batch_size - major, major)
        for t in range(n_tasks)
    ]
    means = []
    shared = rng.standard_normal(dim)
    shared /= np.linalg.norm(shared)
    for t in range(n_tasks):
        centre = spread * rng.standard_normal(dim)
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        if orientation == "alternating":
            direction = shared if t % 2 == 0 else -shared
        means.append((centre + 0.5 * gap * direction, centre - 0.5 * gap * direction))
    return CSBMParams(
        mu1=means[0][0],
        mu2=means[0][1],
        p_in=p_in,
        p_out=p_out,
        sigma=sigma,
        batch_plan=plan,
        task_means=means,
    )


def expected_mean_agg(c1, c2, p_in, p_out, mu1, mu2) -> np.ndarray:
    """Expected 1-hop mean aggregation of a community-1 root.

    ``(c1 p_in mu1 + c2 p_out mu2) / (c1 p_in + c2 p_out)`` where ``c1, c2``
    count the vertices the root may connect to.  Counts are reduced by their
    gcd first, so any two calls with the same community ratio follow the same
    arithmetic and agree bitwise.
    """
    c1, c2 = int(c1), int(c2)
    if c1 < 0 or c2 < 0:
        raise ValueError("counts must be nonnegative")
    g = math.gcd(c1, c2) or 1
    r1, r2 = c1 // g, c2 // g
    w1, w2 = r1 * p_in, r2 * p_out
    denom = w1 + w2
    if denom <= 0:
        raise DegenerateInputError("c1*p_in + c2*p_out must be positive")
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    return (w1 * mu1 + w2 * mu2) / denom


@dataclass
class Prop1Report:
    """Analytic versus Monte-Carlo mean aggregation before/after batch 2.

    ``analytic_expectation_task*`` apply the formula to the batch community
    counts as printed.  ``candidate_expectation_task*`` apply it to the counts
    a root can actually attach to (itself excluded), which is the exact
    expectation of the degree-pooled empirical estimate stored in
    ``empirical_mean_task*``.
    """

    analytic_expectation_task1: np.ndarray
    analytic_expectation_task2: np.ndarray
    candidate_expectation_task1: np.ndarray
    candidate_expectation_task2: np.ndarray
    empirical_mean_task1: np.ndarray
    empirical_mean_task2: np.ndarray
    standard_errors: np.ndarray  # shape (2, dim): task1, task2
    vertex_mean_task1: np.ndarray
    vertex_mean_task2: np.ndarray
    trials: int
    dropped_isolated: int
    verdict: bool

    def agreement(self, which: str = "candidate", k: float = 3.0) -> bool:
        """True when both empirical means lie within ``k`` SE of the formula."""
        return bool(np.all(np.abs(self.z_scores(which)) <= k))

    def z_scores(self, which: str = "candidate") -> np.ndarray:
        a = np.stack([
            getattr(self, f"{which}_expectation_task1"),
            getattr(self, f"{which}_expectation_task2"),
        ])
        e = np.stack([self.empirical_mean_task1, self.empirical_mean_task2])
        return (e - a) / self.standard_errors

    def to_text(self) -> str:
        def fmt(v):
            return ",".join(f"{x:.10g}" for x in np.atleast_1d(v))

        rows = {
            "trials": str(self.trials),
            "analytic_expectation_task1": fmt(self.analytic_expectation_task1),
            "analytic_expectation_task2": fmt(self.analytic_expectation_task2),
            "candidate_expectation_task1": fmt(self.candidate_expectation_task1),
            "candidate_expectation_task2": fmt(self.candidate_expectation_task2),
            "empirical_mean_task1": fmt(self.empirical_mean_task1),
            "empirical_mean_task2": fmt(self.empirical_mean_task2),
            "standard_error_task1": fmt(self.standard_errors[0]),
            "standard_error_task2": fmt(self.standard_errors[1]),
            "vertex_mean_task1": fmt(self.vertex_mean_task1),
            "vertex_mean_task2": fmt(self.vertex_mean_task2),
            "dropped_isolated": str(self.dropped_isolated),
            "agreement_candidate_3se": str(self.agreement("candidate")).lower(),
            "agreement_analytic_3se": str(self.agreement("analytic")).lower(),
            "verdict": str(self.verdict).lower(),
        }
        return "".join(f"{k}={v}\n" for k, v in rows.items())


def _ratio_stats(num: np.ndarray, den: np.ndarray):
    """Pooled ratio sum(num)/sum(den) and its delta-method standard error."""
    t = len(den)
    r = num.sum(axis=0) / den.sum()
    resid = num - den[:, None] * r
    se = np.sqrt(resid.var(axis=0, ddof=1) / t) / den.mean()
    return r, se


def verify_prop1(params: CSBMParams, trials: int = 10_000, seed: int = 0) -> Prop1Report:
    """Monte-Carlo check of the mean-aggregation shift between two snapshots.

    For the community-1 vertices of batch 1, the 1-hop neighbour feature mean
    (self excluded) is measured in snapshot 1 and snapshot 2 of ``trials``
    independent graphs.  Isolated roots are dropped.
    """
    if len(params.batch_plan) != 2:
        raise PreconditionError("verify_prop1 needs exactly two batches")
    if trials < 1000:
        raise PreconditionError("verify_prop1 needs at least 1000 trials")
    (a1, b1), (a2, b2) = params.batch_plan
    if a1 == 0:
        raise PreconditionError("batch 1 has no community-1 vertices")
    if params.task_means is not None:
        raise PreconditionError("verify_prop1 assumes shared community means")

    def analytic(c1, c2):
        return expected_mean_agg(c1, c2, params.p_in, params.p_out, params.mu1, params.mu2)

    dim = params.dim
    num = np.zeros((2, trials, dim))
    den = np.zeros((2, trials))
    vmean = np.full((2, trials, dim), np.nan)
    dropped = 0
    roots = np.arange(a1)
    for i in range(trials):
        seq = generate_csbm(params, np.random.SeedSequence([seed, i]))
        for s, snap in enumerate(seq.snapshots):
            adj = snap.adjacency[roots]
            deg = np.asarray(adj.sum(axis=1)).ravel()
            sums = adj @ snap.features
            num[s, i] = sums.sum(axis=0)
            den[s, i] = deg.sum()
            live = deg > 0
            dropped += int((~live).sum())
            if live.any():
                vmean[s, i] = (sums[live] / deg[live, None]).mean(axis=0)

    emp, se = zip(*(_ratio_stats(num[s], den[s]) for s in range(2)))
    se = np.stack(se)
    lit1, lit2 = analytic(a1, b1), analytic(a1 + a2, b1 + b2)
    shift = bool(np.any(lit1 != lit2)) and bool(
        np.any(np.abs(emp[0] - emp[1]) > 3.0 * np.sqrt(se[0] ** 2 + se[1] ** 2))
    )
    return Prop1Report(
        analytic_expectation_task1=lit1,
        analytic_expectation_task2=lit2,
        candidate_expectation_task1=analytic(a1 - 1, b1),
        candidate_expectation_task2=analytic(a1 + a2 - 1, b1 + b2),
        empirical_mean_task1=emp[0],
        empirical_mean_task2=emp[1],
        standard_errors=se,
        vertex_mean_task1=np.nanmean(vmean[0], axis=0),
        vertex_mean_task2=np.nanmean(vmean[1], axis=0),
        trials=trials,
        dropped_isolated=dropped,
        verdict=shift,
    )
