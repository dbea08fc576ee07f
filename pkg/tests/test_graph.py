import numpy as np
import pytest

from netglm.graph import (WeightedGraph, apply_weights, bfs_subgraph,
                          bfs_vertices, build_laplacian, calibrate_range,
                          quadratic_form, read_edgelist)

from conftest import dense_laplacian, grid_graph, path_graph, random_weighted_graph


class TestCalibrateRange:
    def test_closed_form_median(self):
        # median 0.1 mapping to 80% similarity
        d = [0.05, 0.1, 0.2]
        psi = calibrate_range(d, 0.5, 0.8)
        assert psi == pytest.approx(-0.1 / np.log(0.8), rel=1e-12)
        assert psi == pytest.approx(0.44814, rel=1e-4)

    def test_constant_distances(self):
        psi = calibrate_range([0.7] * 5, 0.5, 0.8)
        assert psi == pytest.approx(-0.7 / np.log(0.8), rel=1e-12)

    def test_all_zero_distances_error(self):
        with pytest.raises(ValueError, match="degenerate"):
            calibrate_range([0.0, 0.0, 0.0], 0.5, 0.8)

    def test_bad_similarity(self):
        with pytest.raises(ValueError):
            calibrate_range([1.0], 0.5, 1.0)


class TestApplyWeights:
    def test_minimum_distance_anchor(self):
        g = WeightedGraph.from_edges(3, [(0, 1, 0.5), (1, 2, 0.9)])
        g = apply_weights(g, 0.7)
        assert g.weights[np.argmin(g.distances)] == 1.0

    def test_one_range_unit(self):
        g = WeightedGraph.from_edges(3, [(0, 1, 0.0), (1, 2, 1.0)])
        g = apply_weights(g, 1.0)
        assert g.weights[np.argmax(g.distances)] == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_three_edges(self):
        g = WeightedGraph.from_edges(4, [(0, 1, 0.0), (1, 2, 1.0), (2, 3, 2.0)])
        g = apply_weights(g, 1.0)
        order = np.argsort(g.distances)
        np.testing.assert_allclose(g.weights[order], [1.0, np.exp(-1), np.exp(-2)], rtol=1e-12)

    def test_order_preserving(self, rng):
        g = random_weighted_graph(rng, 25)
        g = apply_weights(g, 0.8)
        order = np.argsort(g.distances)
        d, w = g.distances[order], g.weights[order]
        strict = np.diff(d) > 0
        assert np.all(np.diff(w)[strict] < 0)


class TestLaplacian:
    def test_single_edge(self):
        g = WeightedGraph.from_edges(2, [(0, 1, 1.0)]).replace_weights([0.4])
        lap = build_laplacian(g)
        np.testing.assert_allclose(lap.laplacian.toarray(), [[0.4, -0.4], [-0.4, 0.4]])

    def test_unweighted_path(self):
        lap = build_laplacian(path_graph(3))
        expect = [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
        np.testing.assert_allclose(lap.laplacian.toarray(), expect)

    def test_incidence_equals_degree_form(self, rng):
        g = random_weighted_graph(rng, 20)
        lap = build_laplacian(g)
        M = lap.incidence.toarray()
        np.testing.assert_allclose(M.T @ M, lap.laplacian.toarray(), atol=1e-12)
        np.testing.assert_allclose(lap.laplacian.toarray(), dense_laplacian(g), atol=1e-12)

    def test_row_sums_and_psd(self, rng):
        for _ in range(5):
            g = random_weighted_graph(rng, 30)
            lap = build_laplacian(g)
            rowsums = np.asarray(lap.laplacian.sum(axis=1)).ravel()
            assert np.abs(rowsums).max() < 1e-12
            vals = np.linalg.eigvalsh(lap.laplacian.toarray())
            assert vals.min() > -1e-10


class TestQuadraticForm:
    def test_constant_vector_is_null(self, rng):
        g = random_weighted_graph(rng, 12)
        lap = build_laplacian(g)
        assert abs(quadratic_form(lap, np.full(12, 3.7))) < 1e-10

    def test_single_edge_value(self):
        g = WeightedGraph.from_edges(2, [(0, 1, 1.0)]).replace_weights([0.3])
        lap = build_laplacian(g)
        a, b = 2.0, -1.0
        assert quadratic_form(lap, np.array([a, b])) == pytest.approx(0.3 * (a - b) ** 2)

    def test_edge_sum_oracle(self, rng):
        g = random_weighted_graph(rng, 30)
        lap = build_laplacian(g)
        beta = rng.normal(size=30)
        edge_sum = sum(w * (beta[i] - beta[j]) ** 2
                       for i, j, w in zip(g.src, g.dst, g.weights))
        assert quadratic_form(lap, beta) == pytest.approx(edge_sum, abs=1e-10)

    def test_incidence_norm_identity(self, rng):
        for _ in range(5):
            g = random_weighted_graph(rng, 25)
            lap = build_laplacian(g)
            beta = rng.normal(size=25)
            mb = lap.incidence @ beta
            assert quadratic_form(lap, beta) == pytest.approx(mb @ mb, abs=1e-10)


class TestBfs:
    def test_size_one(self):
        g = path_graph(5)
        sub = bfs_subgraph(g, 2, 1)
        assert sub.n_vertices == 1 and sub.n_edges == 0
        assert sub.vertex_labels.tolist() == [2]

    def test_path_from_end(self):
        g = path_graph(6)
        sub = bfs_subgraph(g, 0, 3)
        assert sorted(sub.vertex_labels.tolist()) == [0, 1, 2]
        assert sub.n_edges == 2

    def test_grid_connected(self):
        g = grid_graph(10, 10)
        sub = bfs_subgraph(g, 0, 40)
        assert sub.n_vertices == 40
        lap = build_laplacian(sub)
        vals = np.linalg.eigvalsh(lap.laplacian.toarray())
        assert np.sum(vals < 1e-8) == 1  # one zero eigenvalue: connected

    def test_deterministic(self):
        g = grid_graph(8, 8)
        a = bfs_vertices(g, 5, 30)
        b = bfs_vertices(g, 5, 30)
        np.testing.assert_array_equal(a, b)

    def test_layer_tie_order(self):
        # star: all neighbors in one layer, taken ascending
        g = WeightedGraph.from_edges(5, [(0, 4, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 1, 1.0)])
        got = bfs_vertices(g, 0, 3)
        np.testing.assert_array_equal(got, [0, 1, 2])

    def test_too_large_names_component(self):
        g = WeightedGraph.from_edges(5, [(0, 1, 1.0), (2, 3, 1.0), (3, 4, 1.0)])
        with pytest.raises(ValueError, match="only 2"):
            bfs_vertices(g, 0, 3)


class TestConstruction:
    def test_duplicate_edges_keep_min(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="netglm.graph"):
            g = WeightedGraph.from_edges(2, [(0, 1, 2.0), (1, 0, 0.5)])
        assert g.n_edges == 1
        assert g.distances[0] == 0.5
        assert "duplicate" in caplog.text

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            WeightedGraph.from_edges(2, [(1, 1, 1.0)])

    def test_weights_range_enforced(self):
        with pytest.raises(ValueError, match="weights"):
            WeightedGraph.from_edges(2, [(0, 1, 1.0)]).replace_weights([1.5])


class TestEdgelistIO:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "edges.csv"
        path.write_text("src,dst,distance\nb,a,1.5\nc,b,0.5\n")
        g = read_edgelist(path)
        assert g.n_vertices == 3
        assert g.vertex_labels.tolist() == ["a", "b", "c"]
        # labels sorted, so edge (b,a) -> (0,1)
        assert (g.src.tolist(), g.dst.tolist()) == ([0, 1], [1, 2])
        np.testing.assert_allclose(sorted(g.distances), [0.5, 1.5])

    def test_missing_header(self, tmp_path):
        path = tmp_path / "edges.csv"
        path.write_text("from,to,len\na,b,1\n")
        with pytest.raises(ValueError, match="header"):
            read_edgelist(path)
