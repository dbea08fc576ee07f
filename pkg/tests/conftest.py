import numpy as np
import pytest

from netglm.graph import WeightedGraph, apply_weights


def random_weighted_graph(rng, n, extra=0.5):
    """Connected random graph: a random spanning tree plus extra chords,
    distances uniform on (0.1, 2)."""
    edges = []
    order = rng.permutation(n)
    for i in range(1, n):
        j = order[rng.integers(0, i)]
        edges.append((order[i], j, rng.uniform(0.1, 2.0)))
    seen = {(min(a, b), max(a, b)) for a, b, _ in edges}
    for _ in range(int(extra * n)):
        a, b = rng.integers(0, n, size=2)
        if a != b and (min(a, b), max(a, b)) not in seen:
            seen.add((min(a, b), max(a, b)))
            edges.append((a, b, rng.uniform(0.1, 2.0)))
    g = WeightedGraph.from_edges(n, edges)
    return apply_weights(g, rng.uniform(0.3, 1.5))


def path_graph(n, distance=1.0):
    return WeightedGraph.from_edges(n, [(i, i + 1, distance) for i in range(n - 1)])


def grid_graph(rows, cols, distance=1.0):
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1, distance))
            if r + 1 < rows:
                edges.append((v, v + cols, distance))
    return WeightedGraph.from_edges(rows * cols, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


def dense_laplacian(graph):
    """Independent dense construction used as an oracle."""
    n = graph.n_vertices
    W = np.zeros((n, n))
    for i, j, w in zip(graph.src, graph.dst, graph.weights):
        W[i, j] += w
        W[j, i] += w
    return np.diag(W.sum(axis=1)) - W
