"""End-to-end runs: data preparation, sequential training, evaluation, artifacts."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ngil.config import ExperimentConfig
from ngil.csbm import generate_csbm, shifted_sequence_params
from ngil.exceptions import PreconditionError
from ngil.formats import load_graph_bundle, snapshots_from_bundle, write_run_artifacts
from ngil.graph import GraphSnapshot, VertexBatch, split_vertices, transductive_view
from ngil.metrics import (
    BoundDiagnostics,
    MetricsReport,
    PerformanceMatrix,
    latent_mmd,
    bound_components,
    compute_metrics,
    evaluate_accuracy,
)
from ngil.nn import GnnParams, ModelState, gnn_forward
from ngil.train import EpochRecord, LearnerState, train_joint, train_task

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    config: ExperimentConfig
    matrix: PerformanceMatrix | None = None
    metrics: MetricsReport | None = None
    bounds: BoundDiagnostics | None = None
    log: list[EpochRecord] = field(default_factory=list)
    drift: list[float] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    timing: dict = field(default_factory=dict)
    model: ModelState | None = None

    @property
    def mean_drift(self) -> float:
        return float(np.mean(self.drift)) if self.drift else math.nan


def prepare_data(config: ExperimentConfig) -> tuple[list[VertexBatch], list[GraphSnapshot]]:
    """Batches (with splits) and the accumulated snapshot after each batch."""
    if config.source == "bundle":
        batches, snapshots, _ = snapshots_from_bundle(load_graph_bundle(config.bundle))
    else:
        params = shifted_sequence_params(
            n_tasks=config.csbm_tasks,
            batch_size=config.csbm_batch_size,
            imbalance=config.csbm_imbalance,
            dim=config.csbm_dim,
            gap=config.csbm_gap,
            spread=config.csbm_spread,
            p_in=config.csbm_p_in,
            p_out=config.csbm_p_out,
            sigma=config.csbm_sigma,
            seed=config.seed,
            orientation=config.csbm_orientation,
        )
        seq = generate_csbm(params, seed=config.seed)
        batches, snapshots = seq.batches, seq.snapshots
    batches = [split_vertices(b, config.split, seed=config.seed) for b in batches]
    return batches, snapshots


def _views(config, batches, snapshots):
    if config.mode == "inductive":
        return list(snapshots)
    return [transductive_view(s, batches[: i + 1]) for i, s in enumerate(snapshots)]


def _evaluate_row(model, view, batches, i, matrix):
    for j in range(i + 1):
        v, y = batches[j].test()
        acc = evaluate_accuracy(model, view, batches[j].task_index, v, y)
        # stored at artifact precision so metrics recomputed from the CSV agree exactly
        matrix[i + 1, j + 1] = round(acc, 6)


def _drift(model, prev_view, view, batch, config):
    z_before = gnn_forward(model.encoder, prev_view, batch.vertices)
    z_after = gnn_forward(model.encoder, view, batch.vertices)
    return latent_mmd(z_before, z_after, config.kernel(), 1024, [config.seed, batch.task_index, 13])


def run_sequence(config: ExperimentConfig, out_dir=None) -> RunResult:
    """Train over every task in order and evaluate after each one.

    After task i the matrix row i holds test accuracy for tasks 1..i, read
    on snapshot i (inductive) or on each task's own batch subgraph
    (transductive).  Any failure marks the result aborted, flushes partial
    artifacts when ``out_dir`` is set and re-raises.
    """
    config.validate()
    out_dir = out_dir if out_dir is not None else config.out_dir
    result = RunResult(config=config)
    t_start = time.perf_counter()
    completed = 0
    try:
        batches, snapshots = prepare_data(config)
        views = _views(config, batches, snapshots)
        m = len(batches)
        matrix = PerformanceMatrix(m)
        result.matrix = matrix
        cfg = config.ssrm_config()
        encoder = GnnParams.init(
            snapshots[0].dim, config.hidden, config.layers, config.activation, seed=[config.seed, 1]
        )
        state = LearnerState(model=ModelState(encoder))
        result.model = state.model
        if config.trainer == "joint":
            train_joint(state, batches, views[-1], cfg, seed=config.seed)
            for i in range(m):
                _evaluate_row(state.model, views[i], batches, i, matrix)
                completed = i + 1
        else:
            for i in range(m):
                train_task(state, batches[i], views[i], config.trainer, cfg, seed=config.seed)
                _evaluate_row(state.model, views[i], batches, i, matrix)
                completed = i + 1
                if i >= 1:
                    result.drift.append(_drift(state.model, views[i - 1], views[i], batches[i - 1], config))
                if i == 1 and config.bound_diagnostics:
                    result.bounds = bound_components(
                        state.model,
                        (views[0], views[1]),
                        (batches[0], batches[1]),
                        q=config.bound_q,
                        kernel=config.kernel(),
                        seed=config.seed,
                    )
        result.metrics = compute_metrics(matrix, forgetting_defined=config.trainer != "joint")
        result.log = state.log
    except Exception as exc:
        result.status = "aborted"
        result.error = f"{type(exc).__name__}: {exc}"
        if result.matrix is not None and completed < result.matrix.m:
            result.matrix = _truncate(result.matrix, completed)
        _finish(result, t_start, out_dir, locals().get("state"))
        raise
    _finish(result, t_start, out_dir, state)
    return result


def _truncate(matrix: PerformanceMatrix, rows: int) -> PerformanceMatrix | None:
    if rows == 0:
        return None
    return PerformanceMatrix.from_rows(matrix.rows()[:rows])


def _finish(result, t_start, out_dir, state):
    if state is not None:
        result.log = state.log
    total = time.perf_counter() - t_start
    epoch = sum(r.seconds for r in result.log)
    reg = sum(r.reg_seconds for r in result.log)
    result.timing = {
        "total_seconds": total,
        "epoch_seconds": epoch,
        "reg_seconds": reg,
        "reg_fraction": reg / epoch if epoch > 0 else 0.0,
        "epochs": len(result.log),
    }
    if out_dir is not None:
        write_run_artifacts(result, out_dir)


def trial_seed(seed: int, k: int) -> int:
    """Seed of the k-th trial of a multi-trial run."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0] % (2**31))


def _run_trial(args):
    config, k, base = args
    out = Path(base) / f"trial_{k:03d}" if base is not None else None
    res = run_sequence(config, out)
    res.model = None
    return res


def run_trials(config: ExperimentConfig, trials: int, out_dir=None, workers: int | None = None):
    """Run ``trials`` seed-derived copies of ``config`` in separate processes."""
    from concurrent.futures import ProcessPoolExecutor
    import os

    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    jobs = [
        (config.with_overrides(seed=trial_seed(config.seed, k), out_dir=None), k, out_dir)
        for k in range(trials)
    ]
    workers = workers or min(trials, os.cpu_count() or 1)
    if workers == 1:
        return [_run_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, jobs))
