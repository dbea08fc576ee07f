"""Weighted graphs, distance-to-similarity calibration, and Laplacian operators.

Vertices carry dense integer ids in ``[0, n)``.  Edges are undirected, stored
once per unordered pair with a nonnegative distance and a similarity weight in
``(0, 1]``.  Distances are what the data provides (e.g. street lengths);
weights are derived from them with an exponential decay whose scale is the
range parameter returned by :func:`calibrate_range`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)


@dataclass
class WeightedGraph:
    """Simple undirected graph with per-edge distances and similarity weights.

    Instances are treated as immutable after construction: operations that
    change weights or topology return new graphs.  Safe to share read-only
    across threads.

    Attributes
    ----------
    n_vertices : int
        Number of vertices; ids are dense in ``[0, n_vertices)``.
    src, dst : ndarray of int
        Edge endpoints with ``src < dst`` (one row per unordered pair).
    distances : ndarray of float
        Nonnegative, finite edge distances.
    weights : ndarray of float
        Edge similarities in ``(0, 1]``.  Defaults to all ones (unweighted)
        until :func:`apply_weights` derives them from the distances.
    vertex_labels : ndarray or None
        Optional external ids (e.g. the strings from an edge-list file).
    """

    n_vertices: int
    src: np.ndarray
    dst: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    vertex_labels: np.ndarray | None = None
    _adj: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.n_vertices <= 0:
            raise ValueError("graph needs at least one vertex")
        if not (len(self.src) == len(self.dst) == len(self.distances) == len(self.weights)):
            raise ValueError("edge arrays must have equal length")
        if len(self.src) and (self.src.min() < 0 or max(self.src.max(), self.dst.max()) >= self.n_vertices):
            raise ValueError("vertex ids must be dense in [0, n_vertices)")
        if np.any(self.src == self.dst):
            raise ValueError("self-loops are not allowed")
        if np.any(self.src > self.dst):
            raise ValueError("edges must be stored with src < dst")
        if not np.all(np.isfinite(self.distances)) or np.any(self.distances < 0):
            raise ValueError("distances must be finite and >= 0")
        if np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise ValueError("weights must lie in (0, 1]")
        if len(self.src):
            pairs = self.src * self.n_vertices + self.dst
            if len(np.unique(pairs)) != len(pairs):
                raise ValueError("duplicate edges; deduplicate via from_edges()")
        if self.vertex_labels is not None and len(self.vertex_labels) != self.n_vertices:
            raise ValueError("vertex_labels length must equal n_vertices")

    @classmethod
    def from_edges(cls, n_vertices, edges, vertex_labels=None):
        """Build a graph from ``(i, j, distance)`` triples.

        Endpoints may come in either order.  Duplicate unordered pairs are
        collapsed to the one with the smallest distance (strongest
        similarity), with a warning.
        """
        edges = np.asarray(edges, dtype=float)
        if edges.size == 0:
            edges = edges.reshape(0, 3)
        if edges.ndim != 2 or edges.shape[1] != 3:
            raise ValueError("edges must be (i, j, distance) triples")
        i = edges[:, 0].astype(np.int64)
        j = edges[:, 1].astype(np.int64)
        d = edges[:, 2]
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        order = np.lexsort((d, hi, lo))
        lo, hi, d = lo[order], hi[order], d[order]
        pair = lo * max(n_vertices, 1) + hi
        keep = np.ones(len(pair), dtype=bool)
        keep[1:] = pair[1:] != pair[:-1]
        n_dupes = len(pair) - keep.sum()
        if n_dupes:
            log.warning("dropped %d duplicate edge rows, keeping the minimum distance", n_dupes)
        lo, hi, d = lo[keep], hi[keep], d[keep]
        return cls(
            n_vertices=n_vertices,
            src=lo,
            dst=hi,
            distances=d,
            weights=np.ones(len(d)),
            vertex_labels=None if vertex_labels is None else np.asarray(vertex_labels),
        )

    @property
    def n_edges(self):
        return len(self.src)

    def adjacency(self):
        """Symmetric sparse adjacency matrix of weights (cached)."""
        if self._adj is None:
            n = self.n_vertices
            rows = np.concatenate([self.src, self.dst])
            cols = np.concatenate([self.dst, self.src])
            vals = np.concatenate([self.weights, self.weights])
            self._adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._adj

    def replace_weights(self, weights):
        return WeightedGraph(
            n_vertices=self.n_vertices,
            src=self.src,
            dst=self.dst,
            distances=self.distances,
            weights=np.asarray(weights, dtype=float),
            vertex_labels=self.vertex_labels,
        )


@dataclass
class LaplacianOps:
    """Incidence and Laplacian operators of a weighted graph.

    ``incidence`` is the oriented edge-by-vertex matrix with entries
    ``+sqrt(w)`` at the edge source and ``-sqrt(w)`` at the destination, so
    that ``incidence.T @ incidence`` equals the Laplacian ``degrees - W``.
    Both are stored sparse; the two constructions are checked to agree
    entrywise within 1e-10 at build time.
    """

    incidence: sp.csr_matrix
    laplacian: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n_vertices(self):
        return self.laplacian.shape[0]


def calibrate_range(distances, target_quantile=0.5, target_similarity=0.8):
    """Solve for the decay range mapping a distance quantile to a similarity.

    Returns the scale ``r`` with ``exp(-q / r) == target_similarity`` where
    ``q`` is the ``target_quantile`` of ``distances``.  A typical calibration
    maps the median distance to 80% similarity.
    """
    distances = np.asarray(distances, dtype=float)
    if distances.size == 0:
        raise ValueError("distances must be nonempty")
    if not 0 < target_similarity < 1:
        raise ValueError("target_similarity must lie in (0, 1)")
    q = float(np.quantile(distances, target_quantile))
    if q <= 0:
        raise ValueError("degenerate metric: the target quantile of the distances is zero")
    return -q / np.log(target_similarity)


def apply_weights(graph, decay_range):
    """Derive similarity weights from distances by exponential decay.

    ``w = exp(-(d - d_min) / decay_range)``: shifting by the minimum distance
    anchors the closest pair at weight exactly 1, which keeps the weights
    scale-free even when no zero-length edge exists.
    """
    if decay_range <= 0:
        raise ValueError("decay_range must be positive")
    if graph.n_edges == 0:
        return graph.replace_weights(graph.weights)
    d = graph.distances
    w = np.exp(-(d - d.min()) / decay_range)
    return graph.replace_weights(w)


def build_laplacian(graph):
    """Construct incidence and Laplacian operators for a weighted graph.

    The Laplacian is assembled directly as ``degrees - W`` and verified
    against ``incidence.T @ incidence`` entrywise within 1e-10.
    """
    n = graph.n_vertices
    m = graph.n_edges
    rw = np.sqrt(graph.weights)
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([graph.src, graph.dst]).ravel()
    vals = np.column_stack([rw, -rw]).ravel()
    incidence = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))

    adj = graph.adjacency()
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    laplacian = sp.diags(degrees) - adj
    laplacian = laplacian.tocsr()

    diff = (incidence.T @ incidence) - laplacian
    err = np.abs(diff.data).max() if diff.nnz else 0.0
    if err > 1e-10:
        raise AssertionError(f"incidence and degree constructions disagree by {err:.3e}")
    return LaplacianOps(incidence=incidence, laplacian=laplacian, degrees=degrees)


def quadratic_form(lap, beta):
    """Smoothness penalty ``beta' L beta``, the weighted sum of squared
    differences of ``beta`` across edges."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] != lap.n_vertices:
        raise ValueError("beta length must equal the number of vertices")
    return float(beta @ (lap.laplacian @ beta))


def bfs_vertices(graph, source, size, allowed=None):
    """Vertices reached from ``source`` in breadth-first layer order.

    Layers are visited in order; within a layer, vertices are taken in
    ascending id order, so the result is deterministic.  ``allowed`` (a
    boolean mask) restricts the search to a vertex subset.  Raises if the
    reachable set has fewer than ``size`` vertices, naming its size.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if allowed is not None and not allowed[source]:
        raise ValueError(f"source vertex {source} is not in the allowed set")
    adj = graph.adjacency()
    visited = np.zeros(graph.n_vertices, dtype=bool)
    if allowed is not None:
        visited[~np.asarray(allowed, dtype=bool)] = True
    visited[source] = True
    picked = []
    layer = [int(source)]
    while layer and len(picked) < size:
        for v in layer:
            picked.append(v)
            if len(picked) == size:
                return np.asarray(picked, dtype=np.int64)
        nxt = set()
        for v in layer:
            nxt.update(adj.indices[adj.indptr[v]:adj.indptr[v + 1]].tolist())
        layer = sorted(u for u in nxt if not visited[u])
        for u in layer:
            visited[u] = True
    if len(picked) < size:
        # count the full component for the error message
        comp = len(picked)
        frontier = layer
        while frontier:
            comp += len(frontier)
            nxt = set()
            for v in frontier:
                nxt.update(adj.indices[adj.indptr[v]:adj.indptr[v + 1]].tolist())
            frontier = sorted(u for u in nxt if not visited[u])
            for u in frontier:
                visited[u] = True
        raise ValueError(
            f"requested {size} vertices but the component of vertex {source} has only {comp}"
        )
    return np.asarray(picked, dtype=np.int64)


def induced_subgraph(graph, vertices):
    """Induced subgraph on ``vertices``, relabeled to dense ids.

    New ids follow ascending original id; original ids (or labels, when
    present) are kept in ``vertex_labels``.  Edge distances and current
    weights are carried over unchanged.
    """
    vertices = np.unique(np.asarray(vertices, dtype=np.int64))
    lookup = -np.ones(graph.n_vertices, dtype=np.int64)
    lookup[vertices] = np.arange(len(vertices))
    keep = (lookup[graph.src] >= 0) & (lookup[graph.dst] >= 0)
    labels = graph.vertex_labels[vertices] if graph.vertex_labels is not None else vertices.copy()
    return WeightedGraph(
        n_vertices=len(vertices),
        src=lookup[graph.src[keep]],
        dst=lookup[graph.dst[keep]],
        distances=graph.distances[keep].copy(),
        weights=graph.weights[keep].copy(),
        vertex_labels=labels,
    )


def bfs_subgraph(graph, source, size):
    """Connected induced subgraph of exactly ``size`` vertices grown by BFS."""
    return induced_subgraph(graph, bfs_vertices(graph, source, size))


def component_sizes(graph):
    """Sizes of connected components, and the component label per vertex."""
    n_comp, labels = connected_components(graph.adjacency(), directed=False)
    return np.bincount(labels, minlength=n_comp), labels


def read_edgelist(path, delimiter=","):
    """Read a delimited edge-list file into a :class:`WeightedGraph`.

    The file needs a header with columns ``src``, ``dst`` and ``distance``
    (in any order).  Vertex ids are arbitrary strings; they are mapped to
    dense internal ids in sorted order and kept in ``vertex_labels``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty edge-list file") from None
        header = [h.strip() for h in header]
        required = ("src", "dst", "distance")
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"{path}: edge-list header must contain {required}, missing {missing}")
        isrc, idst, idist = (header.index(c) for c in required)
        rows = [(r[isrc].strip(), r[idst].strip(), float(r[idist])) for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no edges found")
    labels = sorted({r[0] for r in rows} | {r[1] for r in rows})
    index = {lab: k for k, lab in enumerate(labels)}
    edges = [(index[a], index[b], d) for a, b, d in rows]
    return WeightedGraph.from_edges(len(labels), edges, vertex_labels=np.asarray(labels, dtype=object))
