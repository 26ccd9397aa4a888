"""Evolving-graph data model.

Vertices are dense 0-based integers assigned in arrival order, so a snapshot
built by accumulation always holds ids ``0..n-1``.  Induced views (the
transductive view, retained memory subgraphs, ego graphs) keep the original
global ids and store them in sorted order; adjacency is kept in CSR form over
row positions with neighbor positions sorted ascending.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from ngil.exceptions import StructuralError, VertexNotFoundError

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}


@dataclass(frozen=True, eq=False)
class VertexBatch:
    """Vertices arriving with one task.

    ``labels`` are task-local class indices (0 or 1 for a two-class task);
    ``classes`` maps them back to dataset-wide class ids.  ``split`` is
    ``None`` until :func:`split_vertices` has been applied.
    """

    task_index: int
    vertices: np.ndarray
    labels: np.ndarray
    split: np.ndarray | None = None
    classes: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.split is not None:
            object.__setattr__(self, "split", np.asarray(self.split, dtype=np.int8))
        if self.task_index < 1:
            raise ValueError("task_index must be >= 1")
        if self.vertices.shape != self.labels.shape:
            raise ValueError("vertices and labels must have the same length")
        if len(np.unique(self.vertices)) != len(self.vertices):
            raise StructuralError(f"task {self.task_index}: duplicate vertex ids in batch")

    def __len__(self):
        return len(self.vertices)

    @property
    def num_classes(self):
        return len(self.classes)

    def select(self, which: int) -> tuple[np.ndarray, np.ndarray]:
        """Vertices and local labels carrying split tag ``which``."""
        if self.split is None:
            raise ValueError(f"task {self.task_index} has not been split")
        mask = self.split == which
        return self.vertices[mask], self.labels[mask]

    def train(self):
        return self.select(TRAIN)

    def valid(self):
        return self.select(VALID)

    def test(self):
        return self.select(TEST)


@dataclass(frozen=True, eq=False)
class GraphSnapshot:
    vertex_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    task_horizon: int = 0

    @classmethod
    def empty(cls, dim: int) -> "GraphSnapshot":
        return cls(
            vertex_ids=np.zeros(0, dtype=np.int64),
            indptr=np.zeros(1, dtype=np.int64),
            indices=np.zeros(0, dtype=np.int64),
            features=np.zeros((0, dim)),
            labels=np.zeros(0, dtype=np.int64),
            task_horizon=0,
        )

    @classmethod
    def from_edges(cls, vertex_ids, edges, features, labels=None, task_horizon=0):
        """Build a snapshot from global-id edges (any orientation).

        Raises :class:`StructuralError` on self loops, duplicate edges or
        unknown endpoints.
        """
        vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
        if np.any(np.diff(vertex_ids) <= 0):
            raise StructuralError("vertex ids must be strictly increasing")
        n = len(vertex_ids)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        pos = _positions(vertex_ids, edges.ravel()).reshape(-1, 2)
        if np.any(pos[:, 0] == pos[:, 1]):
            u = edges[pos[:, 0] == pos[:, 1]][0, 0]
            raise StructuralError(f"self loop on vertex {u}")
        lo = np.minimum(pos[:, 0], pos[:, 1])
        hi = np.maximum(pos[:, 0], pos[:, 1])
        if len(lo):
            key = lo * n + hi
            uniq, counts = np.unique(key, return_counts=True)
            if np.any(counts > 1):
                k = uniq[counts > 1][0]
                raise StructuralError(
                    f"duplicate edge ({vertex_ids[k // n]}, {vertex_ids[k % n]})"
                )
        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise StructuralError("features must have one row per vertex")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        return cls(
            vertex_ids=vertex_ids,
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
            features=features,
            labels=labels,
            task_horizon=task_horizon,
        )

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_ids)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.num_vertices
        return sp.csr_matrix(
            (np.ones(len(self.indices)), self.indices, self.indptr), shape=(n, n)
        )

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def positions(self, ids) -> np.ndarray:
        """Row positions of global ``ids``; raises if any id is absent."""
        return _positions(self.vertex_ids, ids)

    def __contains__(self, v) -> bool:
        i = np.searchsorted(self.vertex_ids, v)
        return bool(i < len(self.vertex_ids) and self.vertex_ids[i] == v)

    def neighbors(self, v) -> np.ndarray:
        (p,) = self.positions([v])
        return self.vertex_ids[self.indices[self.indptr[p] : self.indptr[p + 1]]]

    def edges(self) -> np.ndarray:
        """All undirected edges as an ``(E, 2)`` array of global ids, u < v."""
        rows = np.repeat(np.arange(self.num_vertices), self.degrees)
        mask = rows < self.indices
        return np.column_stack(
            [self.vertex_ids[rows[mask]], self.vertex_ids[self.indices[mask]]]
        )

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges()}


@dataclass(frozen=True, eq=False)
class EgoGraph:
    """The k-hop neighbourhood of ``root`` as a standalone graph."""

    root: int
    k: int
    graph: GraphSnapshot

    @property
    def local_vertices(self) -> np.ndarray:
        return self.graph.vertex_ids

    @property
    def local_adjacency(self) -> sp.csr_matrix:
        return self.graph.adjacency

    @property
    def local_features(self) -> np.ndarray:
        return self.graph.features


def _positions(vertex_ids: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids.copy()
    if len(vertex_ids) == 0:
        raise VertexNotFoundError(f"vertex {int(ids.ravel()[0])} not in graph")
    pos = np.searchsorted(vertex_ids, ids)
    bad = vertex_ids[np.minimum(pos, len(vertex_ids) - 1)] != ids
    if np.any(bad):
        raise VertexNotFoundError(f"vertex {int(ids[bad].ravel()[0])} not in graph")
    return pos


def accumulate_snapshot(
    base: GraphSnapshot | None,
    batch: VertexBatch,
    new_edges,
    features,
    labels=None,
) -> GraphSnapshot:
    """Return ``base`` grown by ``batch`` and the edges attaching it.

    Batch vertices must continue the dense arrival-order numbering.  Every new
    edge needs at least one endpoint in the batch; an edge between two
    vertices already present in ``base`` is rejected.
    """
    features = np.asarray(features, dtype=np.float64)
    if base is None:
        base = GraphSnapshot.empty(features.shape[1])
    n0 = base.num_vertices
    expected = np.arange(n0, n0 + len(batch))
    if not np.array_equal(batch.vertices, expected):
        raise StructuralError(
            f"task {batch.task_index}: batch ids must be {n0}..{n0 + len(batch) - 1}"
        )
    if features.shape != (len(batch), base.dim):
        raise StructuralError("batch features must have shape (len(batch), dim)")
    new_edges = np.asarray(new_edges, dtype=np.int64).reshape(-1, 2)
    n1 = n0 + len(batch)
    if np.any((new_edges < 0) | (new_edges >= n1)):
        bad = new_edges[np.any((new_edges < 0) | (new_edges >= n1), axis=1)][0]
        raise StructuralError(f"edge ({bad[0]}, {bad[1]}) references an unknown vertex")
    old = np.all(new_edges < n0, axis=1)
    if np.any(old):
        bad = new_edges[old][0]
        raise StructuralError(
            f"edge ({bad[0]}, {bad[1]}) joins two pre-existing vertices"
        )
    if labels is None:
        labels = np.asarray(batch.classes)[batch.labels] if len(batch) else np.zeros(0)
    all_labels = None
    if base.labels is not None:
        all_labels = np.concatenate([base.labels, np.asarray(labels, dtype=np.int64)])
    return GraphSnapshot.from_edges(
        np.arange(n1),
        np.concatenate([base.edges(), new_edges]),
        np.vstack([base.features, features]),
        all_labels,
        task_horizon=base.task_horizon + 1,
    )


def hop_distances(snapshot: GraphSnapshot, root_positions, k: int) -> np.ndarray:
    """Hop distance from the nearest root for every position, -1 beyond ``k``."""
    dist = np.full(snapshot.num_vertices, -1, dtype=np.int64)
    frontier = np.unique(np.asarray(root_positions, dtype=np.int64))
    dist[frontier] = 0
    indptr, indices = snapshot.indptr, snapshot.indices
    for hop in range(1, k + 1):
        if not len(frontier):
            break
        starts, stops = indptr[frontier], indptr[frontier + 1]
        lens = stops - starts
        if lens.sum() == 0:
            break
        offs = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        nbrs = indices[offs]
        nbrs = np.unique(nbrs[dist[nbrs] < 0])
        dist[nbrs] = hop
        frontier = nbrs
    return dist


def k_hop_positions(snapshot: GraphSnapshot, root_positions, k: int) -> np.ndarray:
    """Sorted positions within ``k`` hops of any of ``root_positions``."""
    return np.flatnonzero(hop_distances(snapshot, root_positions, k) >= 0)


def _induced_by_positions(snapshot: GraphSnapshot, pos: np.ndarray) -> GraphSnapshot:
    sub = snapshot.adjacency[pos][:, pos].tocsr()
    sub.sort_indices()
    return GraphSnapshot(
        vertex_ids=snapshot.vertex_ids[pos],
        indptr=sub.indptr.astype(np.int64),
        indices=sub.indices.astype(np.int64),
        features=snapshot.features[pos],
        labels=None if snapshot.labels is None else snapshot.labels[pos],
        task_horizon=snapshot.task_horizon,
    )


def ego_graph(snapshot: GraphSnapshot, root: int, k: int) -> EgoGraph:
    if k < 0:
        raise ValueError("k must be >= 0")
    (p,) = snapshot.positions([root])
    ball = k_hop_positions(snapshot, [p], k)
    return EgoGraph(root=int(root), k=k, graph=_induced_by_positions(snapshot, ball))


def induced_subgraph(snapshot: GraphSnapshot, keep: Iterable[int]) -> GraphSnapshot:
    keep = np.unique(np.fromiter(keep, dtype=np.int64) if not isinstance(keep, np.ndarray) else keep.astype(np.int64))
    try:
        pos = snapshot.positions(keep)
    except VertexNotFoundError as exc:
        raise StructuralError(str(exc)) from None
    return _induced_by_positions(snapshot, pos)


def transductive_view(snapshot: GraphSnapshot, batches: Sequence[VertexBatch]) -> GraphSnapshot:
    """Drop every edge whose endpoints arrived with different batches.

    Each batch's vertices then see exactly ``induced_subgraph(snapshot, batch)``.
    """
    owner = np.full(snapshot.num_vertices, -1, dtype=np.int64)
    for b in batches:
        present = b.vertices[np.isin(b.vertices, snapshot.vertex_ids)]
        owner[snapshot.positions(present)] = b.task_index
    e = snapshot.edges()
    pe = snapshot.positions(e.ravel()).reshape(-1, 2)
    same = owner[pe[:, 0]] == owner[pe[:, 1]]
    return GraphSnapshot.from_edges(
        snapshot.vertex_ids, e[same], snapshot.features, snapshot.labels, snapshot.task_horizon
    )


def split_vertices(batch: VertexBatch, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> VertexBatch:
    """Stratified train/valid/test assignment, deterministic per ``seed``.

    Classes with fewer than three members go entirely to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if len(batch) == 0:
        raise ValueError("cannot split an empty batch")
    rng = np.random.default_rng([seed, batch.task_index])
    split = np.full(len(batch), TRAIN, dtype=np.int8)
    for c in np.unique(batch.labels):
        members = np.flatnonzero(batch.labels == c)
        if len(members) < 3:
            warnings.warn(
                f"task {batch.task_index}: class {c} has {len(members)} vertices, all assigned to train",
                stacklevel=2,
            )
            continue
        members = rng.permutation(members)
        n_train = int(round(ratios[0] * len(members)))
        n_valid = int(round(ratios[1] * len(members)))
        n_valid = min(n_valid, len(members) - n_train)
        split[members[n_train : n_train + n_valid]] = VALID
        split[members[n_train + n_valid :]] = TEST
    return replace(batch, split=split)
