"""Performance-matrix metrics, accuracy, risks and bound diagnostics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngil.csbm import CSBMParams, generate_csbm
from ngil.exceptions import PreconditionError
from ngil.graph import GraphSnapshot, VertexBatch, accumulate_snapshot, split_vertices
from ngil.metrics import (
    PerformanceMatrix,
    bootstrap_band,
    bound_components,
    compute_metrics,
    evaluate_accuracy,
    latent_mmd,
    lq_risk,
    permutation_null,
    predict_logits,
)
from ngil.mmd import KernelConfig
from ngil.nn import GnnParams, ModelState, gnn_forward


def spreadsheet_metrics(rows):
    """Cell-by-cell arithmetic, the way one would lay it out by hand."""
    m = len(rows)
    aps = []
    for i in range(m):
        total = 0.0
        for j in range(i + 1):
            total += rows[i][j]
        aps.append(total / (i + 1))
    afs = []
    for i in range(1, m):
        total = 0.0
        for j in range(i + 1):
            total += rows[i][j] - rows[j][j]
        afs.append(total / (i + 1))
    return aps, afs


def two_task_model(seed=0, dim=1, layers=1):
    model = ModelState(GnnParams.init(dim, 4, layers, seed=seed))
    model.heads.add(1, 4, seed=seed)
    model.heads.add(2, 4, seed=seed + 1)
    return model


class TestPerformanceMatrix:
    def test_hand_example(self):
        rep = compute_metrics(PerformanceMatrix.from_rows([[0.9], [0.8, 0.85]]))
        assert rep.fap == pytest.approx(0.825, abs=1e-12)
        assert rep.faf == pytest.approx(-0.05, abs=1e-12)
        assert rep.aps == pytest.approx([0.9, 0.825])

    def test_constant_matrix(self):
        rows = [[0.7] * (i + 1) for i in range(6)]
        rep = compute_metrics(PerformanceMatrix.from_rows(rows))
        assert rep.faf == 0.0 and rep.fap == pytest.approx(0.7, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_random_oracle(self, m, seed):
        rng = np.random.default_rng(seed)
        rows = [rng.random(i + 1).tolist() for i in range(m)]
        rep = compute_metrics(PerformanceMatrix.from_rows(rows))
        aps, afs = spreadsheet_metrics(rows)
        np.testing.assert_allclose(rep.aps, aps, atol=1e-12)
        np.testing.assert_allclose(rep.afs, afs, atol=1e-12)
        assert rep.fap == rep.aps[-1]
        if m == 1:
            assert rep.faf is None
        else:
            assert rep.faf == rep.afs[-1]

    def test_joint_marks_forgetting_undefined(self):
        rep = compute_metrics(PerformanceMatrix.from_rows([[0.9], [0.8, 0.85]]), forgetting_defined=False)
        assert rep.faf is None and rep.to_dict()["FAF"] == "N.A."

    def test_validation(self):
        pm = PerformanceMatrix(2)
        pm[1, 1] = 0.5
        with pytest.raises(PreconditionError):
            compute_metrics(pm)
        with pytest.raises(IndexError):
            pm[1, 2] = 0.5
        with pytest.raises(ValueError):
            pm[2, 1] = 1.5
        with pytest.raises(ValueError):
            PerformanceMatrix.from_rows([[0.5], [0.5]])


class TestAccuracy:
    def setup_method(self):
        rng = np.random.default_rng(4)
        n = 30
        pairs = np.array([(u, v) for u in range(n) for v in range(u + 1, n)])
        self.snap = GraphSnapshot.from_edges(np.arange(n), pairs[rng.random(len(pairs)) < 0.15], rng.standard_normal((n, 3)))
        self.model = ModelState(GnnParams.init(3, 5, 2, seed=2))
        self.model.heads.add(1, 5, seed=3)
        self.verts = np.arange(0, n, 2)
        self.labels = rng.integers(0, 2, len(self.verts))

    def test_loop_oracle(self):
        got = evaluate_accuracy(self.model, self.snap, 1, self.verts, self.labels)
        correct = 0
        for v, y in zip(self.verts, self.labels):
            logits = predict_logits(self.model, self.snap, 1, [v])[0]
            best = 0
            for c in range(1, len(logits)):
                if logits[c] > logits[best]:
                    best = c
            correct += best == y
        assert got == correct / len(self.verts)

    def test_all_correct_and_ties(self):
        pred = np.argmax(predict_logits(self.model, self.snap, 1, self.verts), 1)
        assert evaluate_accuracy(self.model, self.snap, 1, self.verts, pred) == 1.0
        self.model.heads.weights[1][:] = 0.0
        # equal logits: every vertex predicted as class 0
        labels = np.array([0, 1] * (len(self.verts) // 2) + [0] * (len(self.verts) % 2))
        assert evaluate_accuracy(self.model, self.snap, 1, self.verts[: len(labels)], labels) == pytest.approx(
            (labels == 0).mean()
        )

    def test_constant_prediction_balanced(self):
        self.model.heads.weights[1][:] = 0.0
        self.model.heads.biases[1][:] = [0.0, 1.0]
        assert evaluate_accuracy(self.model, self.snap, 1, self.verts[:10], [0, 1] * 5) == 0.5

    def test_empty(self):
        with pytest.raises(PreconditionError):
            evaluate_accuracy(self.model, self.snap, 1, [], [])


class TestRisk:
    def test_lq_risk_values(self):
        p = np.array([[0.8, 0.2], [0.3, 0.7]])
        assert lq_risk(p, [0, 0], q=1) == pytest.approx((0.2 + 0.2 + 0.7 + 0.7) / 4)
        assert lq_risk(p, [0, 1], q=2) == pytest.approx((0.04 * 2 + 0.09 * 2) / 4)
        assert lq_risk(np.eye(2), [0, 1]) == 0.0


class TestBoundDiagnostics:
    def test_no_new_edges_to_v1_gives_zero_drift(self):
        rng = np.random.default_rng(0)
        b1 = split_vertices(VertexBatch(1, np.arange(20), np.repeat([0, 1], 10)), seed=0)
        b2 = split_vertices(VertexBatch(2, np.arange(20, 40), np.repeat([0, 1], 10), classes=(2, 3)), seed=0)
        iu = np.array([(u, v) for u in range(20) for v in range(u + 1, 20)])
        s1 = accumulate_snapshot(None, b1, iu[rng.random(len(iu)) < 0.2], rng.standard_normal((20, 1)))
        s2 = accumulate_snapshot(s1, b2, iu[rng.random(len(iu)) < 0.2] + 20, rng.standard_normal((20, 1)))
        diag = bound_components(two_task_model(), (s1, s2), (b1, b2))
        assert diag.mmd_drift == 0.0
        assert diag.lambda_hat is not None and diag.holds is not None
        d = diag.to_dict()
        assert d["rhs"] == pytest.approx(diag.new_task_risk + diag.mmd_crosstask + diag.lambda_hat)

    def test_without_reference_head(self):
        seq = generate_csbm(CSBMParams([1.0], [-1.0], 0.1, 0.05, [(10, 10), (10, 10)]), seed=0)
        batches = [split_vertices(b, seed=0) for b in seq.batches]
        diag = bound_components(two_task_model(), tuple(seq.snapshots), tuple(batches), reference_head=False)
        assert diag.lambda_hat is None and diag.holds is None
        assert diag.to_dict()["lambda_hat"] == "unavailable"

    def test_missing_head(self):
        seq = generate_csbm(CSBMParams([1.0], [-1.0], 0.1, 0.05, [(10, 10), (10, 10)]), seed=0)
        batches = [split_vertices(b, seed=0) for b in seq.batches]
        model = two_task_model()
        del model.heads.weights[2]
        with pytest.raises(PreconditionError):
            bound_components(model, tuple(seq.snapshots), tuple(batches))

    def test_identical_tasks_crosstask_inside_bootstrap_band(self):
        params = CSBMParams([1.0, 0.0], [-1.0, 0.5], 0.05, 0.01, [(60, 60), (60, 60)])
        seq = generate_csbm(params, seed=3)
        batches = [split_vertices(b, seed=0) for b in seq.batches]
        model = two_task_model(dim=2)
        diag = bound_components(model, tuple(seq.snapshots), tuple(batches))
        z1 = gnn_forward(model.encoder, seq.snapshots[0], batches[0].vertices)
        z2 = gnn_forward(model.encoder, seq.snapshots[1], batches[1].vertices)
        lo, hi = bootstrap_band(z1, z2, n_boot=100, seed=1)
        null = permutation_null(z1, z2, n_perm=100, seed=2)
        assert diag.mmd_crosstask <= np.quantile(null, 0.95)
        assert lo <= diag.mmd_crosstask <= hi

    def test_imbalanced_shift_exceeds_permutation_null(self):
        params = CSBMParams([1.0], [-1.0], 0.1, 0.05, [(80, 20), (20, 80)])
        seq = generate_csbm(params, seed=0)
        batches = [split_vertices(b, seed=0) for b in seq.batches]
        model = two_task_model(seed=1)
        diag = bound_components(model, tuple(seq.snapshots), tuple(batches))
        z11 = gnn_forward(model.encoder, seq.snapshots[0], batches[0].vertices)
        z12 = gnn_forward(model.encoder, seq.snapshots[1], batches[0].vertices)
        null = permutation_null(z11, z12, n_perm=200, seed=0)
        assert diag.mmd_drift > np.quantile(null, 0.95)

    def test_latent_mmd_subsamples(self):
        X = np.random.default_rng(0).standard_normal((50, 2))
        assert latent_mmd(X, X, KernelConfig(), None, 0) == 0.0
        assert latent_mmd(X, X + 1, KernelConfig(), 20, 0) > 0.0
