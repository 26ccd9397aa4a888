"""Plain-text graph bundles and run artifacts.

Bundle layout (format ``ngil-bundle/1``)::

    edges.txt      "u v" per line, u < v, 0-based ids
    features.csv   one row of floats per vertex, in id order
    labels.csv     header "id,label", then one row per vertex
    tasks.csv      header "task_index,class_a,class_b"
    manifest.json  format, counts and SHA-256 of the four files above
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ngil.exceptions import BundleError
from ngil.graph import VertexBatch, accumulate_snapshot
from ngil.metrics import MetricsReport, PerformanceMatrix

BUNDLE_FORMAT = "ngil-bundle/1"
BUNDLE_FILES = ("edges.txt", "features.csv", "labels.csv", "tasks.csv")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class BundleData:
    batches: list[VertexBatch]
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def write_graph_bundle(path, batches, edges, features, labels) -> dict:
    """Write a bundle; ``labels`` are dataset-wide class ids per vertex."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    _write_text(path / "edges.txt", "".join(f"{u} {v}\n" for u, v in edges))
    _write_text(path / "features.csv", "".join(",".join(_fmt(x) for x in row) + "\n" for row in features))
    _write_text(path / "labels.csv", "id,label\n" + "".join(f"{i},{y}\n" for i, y in enumerate(labels)))
    _write_text(
        path / "tasks.csv",
        "task_index,class_a,class_b\n"
        + "".join(f"{b.task_index},{b.classes[0]},{b.classes[1]}\n" for b in batches),
    )
    manifest = {
        "format": BUNDLE_FORMAT,
        "counts": {
            "vertices": int(len(labels)),
            "edges": int(len(edges)),
            "tasks": len(batches),
            "dim": int(features.shape[1]),
        },
        "sha256": {name: _sha256(path / name) for name in BUNDLE_FILES},
    }
    _write_text(path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_csv_rows(path: Path, header: list[str] | None):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    start = 0
    if header is not None:
        if not rows or [c.strip() for c in rows[0]] != header:
            raise BundleError(f"{path.name}:1: expected header {','.join(header)}")
        start = 1
    return [(i + 1, r) for i, r in enumerate(rows) if i >= start and r]


def load_graph_bundle(path) -> BundleData:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise BundleError(f"{path}: manifest.json missing")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"unsupported bundle format {manifest.get('format')!r}")
    for name in BUNDLE_FILES:
        if not (path / name).exists():
            raise BundleError(f"{path}: {name} missing")
        if _sha256(path / name) != manifest["sha256"].get(name):
            raise BundleError(f"{name}: checksum mismatch")
    counts = manifest["counts"]
    n = int(counts["vertices"])

    feats = []
    for lineno, row in _read_csv_rows(path / "features.csv", None):
        try:
            feats.append([float(x) for x in row])
        except ValueError:
            raise BundleError(f"features.csv:{lineno}: non-numeric value") from None
    features = np.array(feats, dtype=np.float64).reshape(len(feats), -1)
    if len(features) != n or features.shape[1] != counts["dim"]:
        raise BundleError("features.csv: row or column count disagrees with manifest")

    labels = np.full(n, -1, dtype=np.int64)
    for lineno, row in _read_csv_rows(path / "labels.csv", ["id", "label"]):
        vid, y = int(row[0]), int(row[1])
        if not 0 <= vid < n:
            raise BundleError(f"labels.csv:{lineno}: id {vid} out of range")
        if labels[vid] != -1:
            raise BundleError(f"labels.csv:{lineno}: duplicate id {vid}")
        labels[vid] = y
    if np.any(labels < 0):
        raise BundleError(f"labels.csv: no label for vertex {int(np.flatnonzero(labels < 0)[0])}")

    tasks = []
    for lineno, row in _read_csv_rows(path / "tasks.csv", ["task_index", "class_a", "class_b"]):
        tasks.append((lineno, int(row[0]), (int(row[1]), int(row[2]))))
    if len(tasks) != counts["tasks"]:
        raise BundleError("tasks.csv: task count disagrees with manifest")
    owner = {}
    for lineno, t, pair in tasks:
        for c in pair:
            if c in owner:
                raise BundleError(f"tasks.csv:{lineno}: class {c} already used by task {owner[c]}")
            owner[c] = t

    lines = (path / "edges.txt").read_text(encoding="utf-8").splitlines()
    edges = np.zeros((len(lines), 2), dtype=np.int64)
    seen = {}
    for k, line in enumerate(lines):
        lineno = k + 1
        parts = line.split()
        if len(parts) != 2:
            raise BundleError(f"edges.txt:{lineno}: expected 'u v'")
        u, v = int(parts[0]), int(parts[1])
        if u >= v:
            raise BundleError(f"edges.txt:{lineno}: need u < v, got {u} {v}")
        if u < 0 or v >= n:
            raise BundleError(f"edges.txt:{lineno}: id out of range")
        if (u, v) in seen:
            raise BundleError(f"edges.txt:{lineno}: duplicate edge {u} {v} (first on line {seen[(u, v)]})")
        seen[(u, v)] = lineno
        edges[k] = (u, v)
    if len(edges) != counts["edges"]:
        raise BundleError("edges.txt: edge count disagrees with manifest")

    lab_lines = {int(r[0]): ln for ln, r in _read_csv_rows(path / "labels.csv", ["id", "label"])}
    for vid in range(n):
        if int(labels[vid]) not in owner:
            raise BundleError(
                f"labels.csv:{lab_lines[vid]}: vertex {vid} has class {labels[vid]} absent from all tasks"
            )

    batches = []
    for _, t, pair in sorted(tasks, key=lambda x: x[1]):
        members = np.flatnonzero(np.isin(labels, pair))
        local = np.where(labels[members] == pair[0], 0, 1)
        batches.append(VertexBatch(task_index=t, vertices=members, labels=local, classes=pair))
    return BundleData(batches=batches, edges=edges, features=features, labels=labels)


def snapshots_from_bundle(data: BundleData):
    """Replay a bundle as an evolving sequence.

    Vertices are renumbered into arrival order (task by task, ascending
    original id within a task) and each edge is attached to the later batch
    of its endpoints.  Returns ``(batches, snapshots, new_to_old)``.
    """
    order = np.concatenate([b.vertices for b in data.batches])
    new_id = np.empty(len(data.labels), dtype=np.int64)
    new_id[order] = np.arange(len(order))
    batches, start = [], 0
    for b in data.batches:
        batches.append(
            VertexBatch(b.task_index, np.arange(start, start + len(b)), b.labels, classes=b.classes)
        )
        start += len(b)
    e = new_id[data.edges] if len(data.edges) else data.edges.reshape(0, 2)
    arrival = np.max(e, axis=1) if len(e) else np.zeros(0, np.int64)
    snaps, snap = [], None
    for b in batches:
        lo, hi = b.vertices[0], b.vertices[-1]
        mask = (arrival >= lo) & (arrival <= hi)
        snap = accumulate_snapshot(snap, b, e[mask], data.features[order[lo : hi + 1]],
                                   labels=data.labels[order[lo : hi + 1]])
        snaps.append(snap)
    return batches, snaps, order


def write_matrix_csv(path, matrix: PerformanceMatrix):
    _write_text(
        Path(path),
        "".join(",".join(f"{x:.6f}" for x in row) + "\n" for row in matrix.rows() if np.all(np.isfinite(row))),
    )


def read_matrix_csv(path) -> PerformanceMatrix:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            raise BundleError(f"{Path(path).name}:{lineno}: non-numeric entry") from None
    try:
        return PerformanceMatrix.from_rows(rows)
    except ValueError as exc:
        raise BundleError(f"{Path(path).name}: {exc}") from None


def metrics_document(report: MetricsReport) -> dict:
    doc = {"FAP": report.fap, "FAF": "N.A." if report.faf is None else report.faf}
    for i, v in enumerate(report.aps, 1):
        doc[f"APS_{i}"] = v
    for i, v in enumerate(report.afs, 2):
        doc[f"AFS_{i}"] = v
    return doc


def _json(path: Path, doc: dict):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_run_artifacts(result, directory) -> dict:
    """Write every artifact of ``result`` and return the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    _write_text(d / "config.json", result.config.to_json())
    written.append("config.json")
    if result.matrix is not None:
        write_matrix_csv(d / "performance_matrix.csv", result.matrix)
        written.append("performance_matrix.csv")
    if result.metrics is not None:
        _json(d / "metrics.json", metrics_document(result.metrics))
        written.append("metrics.json")
    if result.bounds is not None:
        _json(d / "bounds.json", result.bounds.to_dict())
        written.append("bounds.json")
    if result.log:
        buf = io.StringIO()
        cols = list(vars(result.log[0]))
        buf.write(",".join(cols) + "\n")
        for rec in result.log:
            buf.write(",".join(str(getattr(rec, c)) for c in cols) + "\n")
        _write_text(d / "loss_log.csv", buf.getvalue())
        written.append("loss_log.csv")
    manifest = {
        "status": result.status,
        "error": result.error,
        "seed": result.config.seed,
        "config_sha256": result.config.digest(),
        "files": {name: _sha256(d / name) for name in written},
        "timing": result.timing,
    }
    _json(d / "manifest.json", manifest)
    return manifest
