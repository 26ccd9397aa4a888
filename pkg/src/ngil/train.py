"""Continual-learning trainers and the structural-shift MMD regularizer.

Naming follows the main-text objective: ``alpha`` weights the drift of
memory vertices between the previous and current graph, ``beta`` weights
memory-before versus the new batch.

    Reg = alpha * mmd2(Z_bef, Z_aft) + beta * mmd2(Z_bef, Z_new)
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ngil.exceptions import DivergenceError, PreconditionError
from ngil.graph import GraphSnapshot, VertexBatch, induced_subgraph, k_hop_positions
from ngil.mmd import KernelConfig, mmd2_value_and_grad, self_block, subsample_indices
from ngil.nn import (
    EncoderPass,
    GraphContext,
    ModelState,
    OptState,
    adam_step,
    cross_entropy_and_grad,
)

log = logging.getLogger(__name__)

TRAINER_KINDS = ("bare", "joint", "replay", "bare+ssrm", "replay+ssrm")
MEMORY_STRATEGIES = ("uniform", "per-class-uniform")


@dataclass
class SSRMConfig:
    alpha: float = 0.1
    beta: float = 0.5
    memory_budget: int = 10
    mmd_subsample: int = 256
    kernel: KernelConfig = field(default_factory=KernelConfig)
    epochs: int = 200
    lr: float = 5e-3
    patience: int = 20
    min_delta: float = 1e-5
    memory_strategy: str = "per-class-uniform"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.memory_budget < 1:
            raise ValueError("memory_budget must be >= 1")
        if self.mmd_subsample < 2:
            raise ValueError("mmd_subsample must be >= 2")
        if self.memory_strategy not in MEMORY_STRATEGIES:
            raise ValueError(f"memory_strategy must be one of {MEMORY_STRATEGIES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TaskMemory:
    task_index: int
    vertices: np.ndarray
    labels: np.ndarray


@dataclass
class MemoryStore:
    """Stored vertices per past task plus the graph needed to re-embed them.

    ``retained`` is the induced subgraph on the union of the ``hops``-hop
    balls of all stored vertices in the snapshot they were selected from, so
    embedding a stored vertex there equals embedding it in that snapshot.
    """

    tasks: list[TaskMemory] = field(default_factory=list)
    retained: GraphSnapshot | None = None
    hops: int = 2

    def __len__(self):
        return sum(len(t.vertices) for t in self.tasks)

    def vertices(self) -> np.ndarray:
        if not self.tasks:
            return np.zeros(0, np.int64)
        return np.concatenate([t.vertices for t in self.tasks])

    def labels(self) -> np.ndarray:
        if not self.tasks:
            return np.zeros(0, np.int64)
        return np.concatenate([t.labels for t in self.tasks])

    def task_ids(self) -> np.ndarray:
        if not self.tasks:
            return np.zeros(0, np.int64)
        return np.concatenate([np.full(len(t.vertices), t.task_index) for t in self.tasks])


def _select_task(batch: VertexBatch, budget: int, strategy: str, rng) -> tuple[np.ndarray, np.ndarray]:
    verts, labels = batch.train()
    if len(verts) == 0:
        raise PreconditionError(f"task {batch.task_index}: empty train split")
    if budget >= len(verts):
        return verts, labels
    if strategy == "uniform":
        pick = np.sort(rng.choice(len(verts), size=budget, replace=False))
        return verts[pick], labels[pick]
    classes = np.unique(labels)
    per_class = math.ceil(budget / len(classes))
    pick = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        take = min(per_class, len(members))
        pick.append(rng.choice(members, size=take, replace=False))
    pick = np.concatenate(pick)
    if len(pick) > budget:
        pick = rng.choice(pick, size=budget, replace=False)
    pick = np.sort(pick)
    return verts[pick], labels[pick]


def select_memory(
    past_batches: list[VertexBatch],
    budget: int,
    strategy: str = "per-class-uniform",
    seed: int = 0,
    snapshot: GraphSnapshot | None = None,
    hops: int = 2,
) -> MemoryStore:
    """Sample up to ``budget`` train vertices from each past batch.

    Selection for a task depends only on ``(seed, task_index)``, so refreshing
    the store after each task keeps earlier choices stable.  When
    ``snapshot`` is given the ``hops``-hop balls are retained from it.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not past_batches:
        raise PreconditionError("select_memory needs at least one past batch")
    if strategy not in MEMORY_STRATEGIES:
        raise ValueError(f"unknown memory strategy {strategy!r}")
    tasks = []
    for b in past_batches:
        rng = np.random.default_rng([seed, b.task_index, 104729])
        v, y = _select_task(b, budget, strategy, rng)
        tasks.append(TaskMemory(b.task_index, v, y))
    store = MemoryStore(tasks=tasks, hops=hops)
    if snapshot is not None:
        ball = k_hop_positions(snapshot, snapshot.positions(store.vertices()), hops)
        store.retained = induced_subgraph(snapshot, snapshot.vertex_ids[ball])
    return store


@dataclass
class SSRMTerms:
    reg: float = 0.0
    drift: float = 0.0
    crosstask: float = 0.0


def _ssrm_terms(Zb, Za, Zn, alpha, beta, kernel):
    """Regularizer value and its gradients with respect to the three embedding sets."""
    terms = SSRMTerms()
    dZb = np.zeros_like(Zb)
    dZa = np.zeros_like(Za) if Za is not None else None
    dZn = np.zeros_like(Zn) if Zn is not None else None
    use_a = alpha > 0 and Za is not None
    use_n = beta > 0 and Zn is not None
    bb = self_block(Zb, kernel) if use_a and use_n else None
    if use_a:
        v, gb, ga = mmd2_value_and_grad(Zb, Za, kernel, xx=bb)
        terms.drift = v
        dZb += alpha * gb
        dZa += alpha * ga
    if use_n:
        v, gb, gn = mmd2_value_and_grad(Zb, Zn, kernel, xx=bb)
        terms.crosstask = v
        dZb += beta * gb
        dZn += beta * gn
    terms.reg = alpha * terms.drift + beta * terms.crosstask
    return terms, dZb, dZa, dZn


def _ssrm_samples(memory: MemoryStore, new_train: np.ndarray, cap: int, seed):
    """Paired memory subsample and new-batch subsample for one step.

    Returns ``None`` for a side with fewer than two usable vertices.
    """
    mem = memory.vertices()
    mem_idx = new_idx = None
    if len(mem) >= 2:
        mem_idx = np.sort(subsample_indices(len(mem), min(cap, len(mem)), [*seed, 0]))
    else:
        warnings.warn("fewer than 2 memory vertices; SSRM terms skipped", stacklevel=3)
    if len(new_train) >= 2:
        new_idx = np.sort(subsample_indices(len(new_train), min(cap, len(new_train)), [*seed, 1]))
    else:
        warnings.warn("fewer than 2 new train vertices; cross-task term skipped", stacklevel=3)
    return mem_idx, new_idx


def ssrm_regularizer(
    model: ModelState,
    memory: MemoryStore,
    prev_view: GraphSnapshot | None,
    curr_snapshot: GraphSnapshot,
    new_batch: VertexBatch,
    cfg: SSRMConfig,
    seed=(0,),
):
    """``(Reg, encoder gradients, terms)`` with the current encoder weights.

    ``prev_view`` defaults to the store's retained subgraph.  Gradients flow
    through Z_bef, Z_aft and Z_new.
    """
    if len(memory) == 0:
        raise PreconditionError("SSRM needs a nonempty memory store")
    prev_view = memory.retained if prev_view is None else prev_view
    enc = model.encoder
    zero = {k: np.zeros_like(v) for k, v in enc.named().items()}
    if cfg.alpha == 0 and cfg.beta == 0:
        return 0.0, zero, SSRMTerms()
    seed = tuple(np.atleast_1d(seed).tolist())
    new_train, _ = new_batch.train()
    mem_idx, new_idx = _ssrm_samples(memory, new_train, cfg.mmd_subsample, seed)
    if mem_idx is None:
        return 0.0, zero, SSRMTerms()
    I = memory.vertices()[mem_idx]
    pb = EncoderPass(enc, GraphContext(prev_view, I, enc.depth))
    pa = EncoderPass(enc, GraphContext(curr_snapshot, I, enc.depth)) if cfg.alpha > 0 else None
    pn = (
        EncoderPass(enc, GraphContext(curr_snapshot, new_train[new_idx], enc.depth))
        if cfg.beta > 0 and new_idx is not None
        else None
    )
    terms, dZb, dZa, dZn = _ssrm_terms(
        pb.embeddings,
        pa.embeddings if pa else None,
        pn.embeddings if pn else None,
        cfg.alpha,
        cfg.beta,
        cfg.kernel,
    )
    grads = pb.backward(dZb)
    for p, d in ((pa, dZa), (pn, dZn)):
        if p is not None:
            for k, g in p.backward(d).items():
                grads[k] = grads[k] + g
    return terms.reg, grads, terms


@dataclass
class EpochRecord:
    task: int
    epoch: int
    task_loss: float
    replay_loss: float
    reg: float
    drift: float
    crosstask: float
    total: float
    seconds: float
    reg_seconds: float


class TaskObjective:
    """Full training objective for one task, evaluated on a shared forward pass.

    Graph contexts are built once per task.  With SSRM active the current
    graph pass also covers the memory vertices, and a second pass embeds them
    in the retained previous graph.
    """

    def __init__(self, kind, batch, view, memory, cfg: SSRMConfig, depth: int):
        if kind not in TRAINER_KINDS or kind == "joint":
            raise ValueError(f"TaskObjective handles sequential kinds, not {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.task = batch.task_index
        self.new_v, self.new_y = batch.train()
        if len(self.new_v) == 0:
            raise PreconditionError(f"task {self.task}: empty train split")
        self.replay = kind.startswith("replay") and len(memory) > 0
        self.ssrm = (
            kind.endswith("+ssrm") and len(memory) > 0 and (cfg.alpha > 0 or cfg.beta > 0)
        )
        self.memory = memory
        self.mem_v = memory.vertices()
        self.mem_y = memory.labels()
        self.mem_t = memory.task_ids()
        targets = [self.new_v]
        if self.replay or self.ssrm:
            targets.append(self.mem_v)
        targets = np.concatenate(targets)
        self.ctx = GraphContext(view, targets, depth)
        self.n_new = len(self.new_v)
        self.prev_ctx = GraphContext(memory.retained, self.mem_v, depth) if self.ssrm else None

    def __call__(self, model: ModelState, step_seed=(0,), need_grad=True):
        cfg = self.cfg
        enc, heads = model.encoder, model.heads
        t0 = time.perf_counter()
        fwd = EncoderPass(enc, self.ctx)
        E = fwd.embeddings
        dE = np.zeros_like(E)
        grads = {}

        E_new = E[: self.n_new]
        W, b = heads.weights[self.task], heads.biases[self.task]
        task_loss, dlog = cross_entropy_and_grad(E_new @ W + b, self.new_y)
        grads[f"head{self.task}.W"] = E_new.T @ dlog
        grads[f"head{self.task}.b"] = dlog.sum(0)
        dE[: self.n_new] = dlog @ W.T

        replay_loss = 0.0
        if self.replay:
            E_mem = E[self.n_new :]
            n_mem = len(self.mem_v)
            for t in np.unique(self.mem_t):
                rows = np.flatnonzero(self.mem_t == t)
                Wt, bt = heads.weights[t], heads.biases[t]
                loss_t, d_t = cross_entropy_and_grad(E_mem[rows] @ Wt + bt, self.mem_y[rows])
                scale = len(rows) / n_mem
                replay_loss += scale * loss_t
                d_t = d_t * scale
                kW, kb = f"head{t}.W", f"head{t}.b"
                grads[kW] = grads.get(kW, 0.0) + E_mem[rows].T @ d_t
                grads[kb] = grads.get(kb, 0.0) + d_t.sum(0)
                dE[self.n_new + rows] += d_t @ Wt.T

        terms = SSRMTerms()
        reg_seconds = 0.0
        prev_grads = None
        if self.ssrm:
            r0 = time.perf_counter()
            mem_idx, new_idx = _ssrm_samples(self.memory, self.new_v, cfg.mmd_subsample, step_seed)
            if mem_idx is not None:
                prev = EncoderPass(enc, self.prev_ctx)
                Zb = prev.embeddings[mem_idx]
                Za = E[self.n_new + mem_idx] if cfg.alpha > 0 else None
                Zn = E_new[new_idx] if (cfg.beta > 0 and new_idx is not None) else None
                terms, dZb, dZa, dZn = _ssrm_terms(Zb, Za, Zn, cfg.alpha, cfg.beta, cfg.kernel)
                if need_grad:
                    d_prev = np.zeros_like(prev.embeddings)
                    d_prev[mem_idx] = dZb
                    prev_grads = prev.backward(d_prev)
                    if dZa is not None:
                        dE[self.n_new + mem_idx] += dZa
                    if dZn is not None:
                        dE[new_idx] += dZn
            reg_seconds = time.perf_counter() - r0

        total = task_loss + replay_loss + terms.reg
        if need_grad:
            grads.update(fwd.backward(dE))
            if prev_grads is not None:
                r0 = time.perf_counter()
                for k, g in prev_grads.items():
                    grads[k] = grads[k] + g
                reg_seconds += time.perf_counter() - r0
        record = dict(
            task_loss=task_loss,
            replay_loss=replay_loss,
            reg=terms.reg,
            drift=terms.drift,
            crosstask=terms.crosstask,
            total=total,
            reg_seconds=reg_seconds,
            seconds=time.perf_counter() - t0,
        )
        return total, grads, record


@dataclass
class LearnerState:
    model: ModelState
    memory: MemoryStore = field(default_factory=MemoryStore)
    seen: list[VertexBatch] = field(default_factory=list)
    log: list[EpochRecord] = field(default_factory=list)


def _fit(model, objective, cfg: SSRMConfig, seed, task, records):
    """Adam with a fixed epoch budget and plateau early stopping."""
    params = model.params()
    opt = OptState(lr=cfg.lr)
    best = math.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss, grads, rec = objective(model, (seed, task, epoch))
        if not math.isfinite(loss):
            raise DivergenceError(f"task {task} epoch {epoch}: non-finite loss", model.copy())
        checkpoint = {k: v.copy() for k, v in params.items()}
        try:
            adam_step(params, grads, opt)
        except DivergenceError as exc:
            for k, v in checkpoint.items():
                params[k][...] = v
            raise DivergenceError(f"task {task} epoch {epoch}: {exc}", model.copy()) from None
        rec["seconds"] = time.perf_counter() - t0
        records.append(EpochRecord(task=task, epoch=epoch, **rec))
        if loss < best - cfg.min_delta:
            best = loss
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break


def train_task(
    state: LearnerState,
    batch: VertexBatch,
    view: GraphSnapshot,
    kind: str,
    cfg: SSRMConfig,
    seed: int = 0,
    head_seed=None,
) -> LearnerState:
    """Train on one new task, then refresh memory against ``view``.

    ``view`` is the graph the learner sees for this task (the accumulated
    snapshot, or its transductive view).
    """
    if kind not in TRAINER_KINDS or kind == "joint":
        raise ValueError(f"train_task handles sequential kinds; use train_joint for {kind!r}")
    model = state.model
    if batch.task_index != model.horizon + 1:
        raise PreconditionError(
            f"expected task {model.horizon + 1}, got task {batch.task_index}"
        )
    if batch.task_index not in model.heads:
        model.heads.add(
            batch.task_index,
            model.encoder.out_dim,
            batch.num_classes,
            seed=[seed, 2, batch.task_index] if head_seed is None else head_seed,
        )
    objective = TaskObjective(kind, batch, view, state.memory, cfg, model.encoder.depth)
    _fit(model, objective, cfg, seed, batch.task_index, state.log)
    model.horizon += 1
    state.seen.append(batch)
    if kind != "bare":
        state.memory = select_memory(
            state.seen, cfg.memory_budget, cfg.memory_strategy, seed, view, model.encoder.depth
        )
    return state


class JointObjective:
    def __init__(self, batches, view, depth):
        self.parts = []
        for b in batches:
            v, y = b.train()
            self.parts.append((b.task_index, v, y))
        self.ctx = GraphContext(view, np.concatenate([p[1] for p in self.parts]), depth)
        self.n_total = sum(len(p[1]) for p in self.parts)

    def __call__(self, model, step_seed=(0,), need_grad=True):
        t0 = time.perf_counter()
        fwd = EncoderPass(model.encoder, self.ctx)
        E = fwd.embeddings
        dE = np.zeros_like(E)
        grads = {}
        total = 0.0
        start = 0
        for t, v, y in self.parts:
            rows = slice(start, start + len(v))
            start += len(v)
            W, b = model.heads.weights[t], model.heads.biases[t]
            loss, d = cross_entropy_and_grad(E[rows] @ W + b, y)
            w = len(v) / self.n_total
            total += w * loss
            d = d * w
            grads[f"head{t}.W"] = E[rows].T @ d
            grads[f"head{t}.b"] = d.sum(0)
            dE[rows] = d @ W.T
        if need_grad:
            grads.update(fwd.backward(dE))
        rec = dict(task_loss=total, replay_loss=0.0, reg=0.0, drift=0.0, crosstask=0.0,
                   total=total, reg_seconds=0.0, seconds=time.perf_counter() - t0)
        return total, grads, rec


def train_joint(state: LearnerState, batches, view, cfg: SSRMConfig, seed: int = 0) -> LearnerState:
    """Train one model on every task's train split over ``view`` at once."""
    model = state.model
    for b in batches:
        if b.task_index not in model.heads:
            model.heads.add(b.task_index, model.encoder.out_dim, b.num_classes, seed=[seed, 2, b.task_index])
    objective = JointObjective(batches, view, model.encoder.depth)
    _fit(model, objective, cfg, seed, 0, state.log)
    model.horizon = max(b.task_index for b in batches)
    state.seen = list(batches)
    return state


def toy_instance(seed=0, layers=1, hidden=4, activation="relu", dim=3):
    """Two six-vertex batches on twelve vertices, for gradient checks.

    Returns ``(model, memory, batch2, snapshot2)`` with heads for both tasks
    and a memory store drawn from batch 1.
    """
    from ngil.graph import accumulate_snapshot, split_vertices
    from ngil.nn import GnnParams

    rng = np.random.default_rng([seed, 5])
    labels = np.array([0, 0, 0, 1, 1, 1])
    b1 = split_vertices(VertexBatch(1, np.arange(6), labels, classes=(0, 1)), seed=seed)
    b2 = split_vertices(VertexBatch(2, np.arange(6, 12), labels, classes=(2, 3)), seed=seed)
    iu, ju = np.triu_indices(6, 1)
    keep = rng.random(len(iu)) < 0.5
    e1 = np.column_stack([iu[keep], ju[keep]])
    keep = rng.random(len(iu)) < 0.5
    within2 = np.column_stack([iu[keep], ju[keep]]) + 6
    cross = np.column_stack(np.nonzero(rng.random((6, 6)) < 0.3))
    cross[:, 1] += 6
    s1 = accumulate_snapshot(None, b1, e1, rng.standard_normal((6, dim)))
    s2 = accumulate_snapshot(s1, b2, np.vstack([within2, cross]), rng.standard_normal((6, dim)) + 1.0)
    enc = GnnParams.init(dim, hidden, layers, activation, seed=[seed, 1])
    # nonzero biases keep relu pre-activations off the kink at 0
    for b in enc.biases:
        b[...] = rng.uniform(-0.5, 0.5, b.shape)
    model = ModelState(enc)
    model.heads.add(1, hidden, 2, seed=[seed, 2, 1])
    model.heads.add(2, hidden, 2, seed=[seed, 2, 2])
    model.horizon = 1
    memory = select_memory([b1], 4, seed=seed, snapshot=s1, hops=layers)
    return model, memory, b2, s2


def gradient_suite(seed=0, layers=1, hidden=4, activation="relu", eps=1e-5, tolerance=1e-4, cfg=None):
    """Finite-difference checks of the cross-entropy and the full SSRM objective.

    Returns ``{"cross_entropy": GradCheckReport, "ssrm_objective": GradCheckReport}``.
    """
    from ngil.nn import grad_check

    cfg = cfg or SSRMConfig(memory_budget=4)
    reports = {}
    for name, kind in (("cross_entropy", "bare"), ("ssrm_objective", "replay+ssrm")):
        model, memory, b2, s2 = toy_instance(seed, layers, hidden, activation)
        obj = TaskObjective(kind, b2, s2, memory, cfg, model.encoder.depth)
        step = (seed, 2, 0)
        _, grads, _ = obj(model, step)
        params = model.params()
        reports[name] = grad_check(
            lambda p: obj(model, step, need_grad=False)[0],
            params,
            grads,
            eps=eps,
            tolerance=tolerance,
            max_coords=10_000,
            seed=seed,
        )
    return reports
