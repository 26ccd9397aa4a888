"""Graph bundles, performance-matrix CSVs and run artifacts."""

import json

import numpy as np
import pytest

from ngil.config import ExperimentConfig
from ngil.csbm import generate_csbm, shifted_sequence_params
from ngil.exceptions import BundleError, DivergenceError
from ngil.experiment import prepare_data, run_sequence
from ngil.formats import (
    load_graph_bundle,
    read_matrix_csv,
    snapshots_from_bundle,
    write_graph_bundle,
    write_matrix_csv,
)
from ngil.graph import VertexBatch
from ngil.metrics import PerformanceMatrix, compute_metrics


def tiny_bundle(tmp_path):
    batches = [VertexBatch(1, [0, 1, 2], [0, 1, 0], classes=(0, 1)), VertexBatch(2, [3, 4], [0, 1], classes=(2, 3))]
    edges = np.array([[1, 0], [2, 1], [3, 0], [4, 3]])
    features = np.array([[0.1, 1 / 3], [2.0, -1e-300], [3.5, 4.0], [5.0, 6.0], [7.25, 8.0]])
    labels = np.array([0, 1, 0, 2, 3])
    d = tmp_path / "b"
    write_graph_bundle(d, batches, edges, features, labels)
    return d, batches, edges, features, labels


def rewrite(d, name, text):
    """Replace one bundle file and refresh its checksum so validation reaches the content."""
    import hashlib

    (d / name).write_text(text)
    man = json.loads((d / "manifest.json").read_text())
    man["sha256"][name] = hashlib.sha256((d / name).read_bytes()).hexdigest()
    (d / "manifest.json").write_text(json.dumps(man))


class TestBundleRoundTrip:
    def test_identity(self, tmp_path):
        d, batches, edges, features, labels = tiny_bundle(tmp_path)
        data = load_graph_bundle(d)
        np.testing.assert_array_equal(data.features, features)
        np.testing.assert_array_equal(data.labels, labels)
        np.testing.assert_array_equal(data.edges, [[0, 1], [0, 3], [1, 2], [3, 4]])
        for a, b in zip(data.batches, batches):
            assert a.task_index == b.task_index and a.classes == b.classes
            np.testing.assert_array_equal(a.vertices, b.vertices)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_rewrite_is_byte_identical(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        data = load_graph_bundle(d)
        d2 = tmp_path / "again"
        write_graph_bundle(d2, data.batches, data.edges, data.features, data.labels)
        for name in ("edges.txt", "features.csv", "labels.csv", "tasks.csv", "manifest.json"):
            assert (d / name).read_bytes() == (d2 / name).read_bytes()

    def test_csbm_bundle_replays_generator(self, tmp_path):
        params = shifted_sequence_params(n_tasks=4, batch_size=30, seed=2)
        seq = generate_csbm(params, seed=2)
        final = seq.snapshots[-1]
        write_graph_bundle(tmp_path / "c", seq.batches, final.edges(), final.features, final.labels)
        batches, snaps, order = snapshots_from_bundle(load_graph_bundle(tmp_path / "c"))
        np.testing.assert_array_equal(order, np.arange(final.num_vertices))
        for a, b in zip(snaps, seq.snapshots):
            assert a.edge_set() == b.edge_set()
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_bundle_source_matches_generator_run(self, tmp_path):
        cfg = ExperimentConfig(csbm_tasks=3, csbm_batch_size=30, seed=5)
        batches, snaps = prepare_data(cfg)
        final = snaps[-1]
        write_graph_bundle(tmp_path / "r", batches, final.edges(), final.features, final.labels)
        b2, s2 = prepare_data(cfg.with_overrides(source="bundle", bundle=str(tmp_path / "r")))
        for x, y in zip(batches, b2):
            np.testing.assert_array_equal(x.split, y.split)
        assert s2[-1].edge_set() == final.edge_set()

    def test_interleaved_ids_are_renumbered(self, tmp_path):
        batches = [VertexBatch(1, [0, 2], [0, 1], classes=(5, 6)), VertexBatch(2, [1, 3], [0, 1], classes=(7, 8))]
        write_graph_bundle(tmp_path / "i", batches, [[0, 1], [0, 2], [2, 3]], np.arange(8.0).reshape(4, 2), [5, 7, 6, 8])
        nb, snaps, order = snapshots_from_bundle(load_graph_bundle(tmp_path / "i"))
        np.testing.assert_array_equal(order, [0, 2, 1, 3])
        # old edge 0-2 lies inside batch 1, the others reach batch 2
        assert snaps[0].edge_set() == {(0, 1)}
        assert snaps[1].edge_set() == {(0, 1), (0, 2), (1, 3)}
        np.testing.assert_array_equal(snaps[1].features[2], [2.0, 3.0])


class TestBundleValidation:
    def test_checksum(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        (d / "edges.txt").write_text("0 1\n")
        with pytest.raises(BundleError, match="checksum"):
            load_graph_bundle(d)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BundleError, match="manifest"):
            load_graph_bundle(tmp_path)

    @pytest.mark.parametrize(
        "text, message",
        [
            ("0 1\n2 1\n", "edges.txt:2: need u < v"),
            ("0 1\n0 1\n", "edges.txt:2: duplicate edge 0 1 .first on line 1"),
            ("0 9\n", "edges.txt:1: id out of range"),
            ("0 1 2\n", "edges.txt:1: expected"),
        ],
    )
    def test_edge_errors_name_the_line(self, tmp_path, text, message):
        d, *_ = tiny_bundle(tmp_path)
        rewrite(d, "edges.txt", text)
        with pytest.raises(BundleError, match=message):
            load_graph_bundle(d)

    def test_unknown_class(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        rewrite(d, "labels.csv", "id,label\n0,0\n1,1\n2,0\n3,9\n4,3\n")
        with pytest.raises(BundleError, match="labels.csv:5: vertex 3 has class 9"):
            load_graph_bundle(d)

    def test_duplicate_label_id(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        rewrite(d, "labels.csv", "id,label\n0,0\n0,1\n2,0\n3,2\n4,3\n")
        with pytest.raises(BundleError, match="labels.csv:3: duplicate id 0"):
            load_graph_bundle(d)

    def test_class_reused_across_tasks(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        rewrite(d, "tasks.csv", "task_index,class_a,class_b\n1,0,1\n2,1,3\n")
        with pytest.raises(BundleError, match="tasks.csv:3: class 1 already used"):
            load_graph_bundle(d)

    def test_bad_feature(self, tmp_path):
        d, *_ = tiny_bundle(tmp_path)
        rewrite(d, "features.csv", "1,2\n1,x\n1,2\n1,2\n1,2\n")
        with pytest.raises(BundleError, match="features.csv:2"):
            load_graph_bundle(d)


class TestMatrixCsv:
    def test_round_trip(self, tmp_path):
        pm = PerformanceMatrix.from_rows([[0.9], [0.8, 0.85], [0.123456, 0.5, 1.0]])
        write_matrix_csv(tmp_path / "m.csv", pm)
        assert read_matrix_csv(tmp_path / "m.csv").rows() == pm.rows()

    def test_bad_shape(self, tmp_path):
        (tmp_path / "m.csv").write_text("0.5\n0.5\n")
        with pytest.raises(BundleError):
            read_matrix_csv(tmp_path / "m.csv")
        (tmp_path / "m.csv").write_text("0.5\nabc,1\n")
        with pytest.raises(BundleError, match="m.csv:2"):
            read_matrix_csv(tmp_path / "m.csv")


class TestRunArtifacts:
    CFG = dict(csbm_tasks=2, csbm_batch_size=30, epochs=15, hidden=8)

    def test_two_task_run(self, tmp_path):
        res = run_sequence(ExperimentConfig(**self.CFG), out_dir=tmp_path)
        lines = (tmp_path / "performance_matrix.csv").read_text().splitlines()
        assert len(lines) == 2 and len(lines[1].split(",")) == 2
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        recomputed = compute_metrics(read_matrix_csv(tmp_path / "performance_matrix.csv"))
        assert abs(metrics["FAP"] - recomputed.fap) <= 1e-9
        assert abs(metrics["FAF"] - recomputed.faf) <= 1e-9
        assert metrics["FAP"] == res.metrics.fap
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "ok" and manifest["seed"] == 0
        assert set(manifest["files"]) >= {"config.json", "performance_matrix.csv", "metrics.json", "bounds.json", "loss_log.csv"}
        again = ExperimentConfig.load(tmp_path / "config.json")
        assert again == res.config

    def test_aborted_run_leaves_partial_artifacts(self, tmp_path, monkeypatch):
        import ngil.experiment as ex

        real = ex.train_task

        def fail_on_second(state, batch, *a, **kw):
            if batch.task_index == 2:
                raise DivergenceError("synthetic failure")
            return real(state, batch, *a, **kw)

        monkeypatch.setattr(ex, "train_task", fail_on_second)
        with pytest.raises(DivergenceError):
            run_sequence(ExperimentConfig(**self.CFG), out_dir=tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "aborted"
        assert "synthetic failure" in manifest["error"]
        assert (tmp_path / "performance_matrix.csv").read_text().count("\n") == 1
        assert "metrics.json" not in manifest["files"]
