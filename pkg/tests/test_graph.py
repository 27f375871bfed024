import math

import numpy as np
import pytest

from cohesion.graph import (
    KnnGraph,
    SparseAdjacency,
    build_adjacency,
    dump_triplets,
    normalize_sym,
    spmm,
    topk_knn,
)

from . import oracle
from .helpers import random_table


def _brute_neighbors(x, k):
    w, mask = oracle.brute_knn(x, k)
    out = []
    for r in range(x.shape[0]):
        cols = np.flatnonzero(mask[r])
        out.append(sorted(cols.tolist()))
    return out, w


class TestAdjacency:
    def test_single_pair(self):
        a = build_adjacency(random_table(np.random.default_rng(0), 1, 1)).to_dense()
        np.testing.assert_array_equal(a, [[0, 1], [1, 0]])

    def test_counts_and_symmetry(self):
        from cohesion.data import InteractionTable

        t = InteractionTable(np.array([[0, 0], [0, 1], [1, 0]]), ["a", "b"], ["x", "y"])
        adj = build_adjacency(t)
        assert adj.nnz == 6
        d = adj.to_dense()
        np.testing.assert_array_equal(d, d.T)

    @pytest.mark.parametrize("seed", range(10))
    def test_block_structure(self, seed):
        rng = np.random.default_rng(seed)
        nu, ni = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        t = random_table(rng, nu, ni, density=0.3)
        adj = build_adjacency(t)
        d = adj.to_dense()
        assert adj.nnz == 2 * len(t)
        assert not d[:nu, :nu].any() and not d[nu:, nu:].any()
        np.testing.assert_array_equal(d, oracle.dense_adjacency(nu, ni, t.pairs))


class TestNormalize:
    def test_single_edge(self):
        a = normalize_sym(build_adjacency(random_table(np.random.default_rng(0), 1, 1)))
        assert a.val.tolist() == [1.0, 1.0]

    def test_star(self):
        from cohesion.data import InteractionTable

        t = InteractionTable(np.array([[0, 0], [0, 1]]), ["u"], ["a", "b"])
        a = normalize_sym(build_adjacency(t))
        np.testing.assert_allclose(a.val, 1 / math.sqrt(2), rtol=0, atol=1e-15)

    def test_empty(self):
        empty = SparseAdjacency(3, np.zeros(4, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        out = normalize_sym(empty)
        assert out.nnz == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_entries_match_degree_formula(self, seed):
        rng = np.random.default_rng(seed)
        t = random_table(rng, 6, 5, density=0.4)
        adj = build_adjacency(t)
        norm = normalize_sym(adj)
        deg = adj.degrees()
        rows = np.repeat(np.arange(adj.n), np.diff(adj.row_ptr))
        expected = 1.0 / np.sqrt(deg[rows] * deg[norm.col_idx])
        assert np.array_equal(norm.val, expected)

    def test_spectral_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = normalize_sym(build_adjacency(random_table(rng, 6, 7, density=0.3)))
            for _ in range(10):
                x = rng.standard_normal((a.n, 1))
                x /= np.linalg.norm(x)
                assert np.linalg.norm(spmm(a, x)) <= 1.0 + 1e-9


class TestSpmm:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 64))
        dense = rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.2)
        import scipy.sparse as sp

        a = SparseAdjacency.from_scipy(sp.csr_matrix(dense))
        x = rng.standard_normal((n, 3))
        assert np.max(np.abs(spmm(a, x) - dense @ x)) <= 1e-12

    def test_identity_and_zero(self):
        import scipy.sparse as sp

        x = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(spmm(SparseAdjacency.from_scipy(sp.eye(4)), x), x)
        zero = SparseAdjacency(4, np.zeros(5, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        np.testing.assert_array_equal(spmm(zero, x), np.zeros_like(x))

    def test_dimension_mismatch(self):
        import scipy.sparse as sp

        with pytest.raises(ValueError):
            spmm(SparseAdjacency.from_scipy(sp.eye(4)), np.zeros((3, 2)))


class TestKnn:
    def test_identical_rows_tie_break(self):
        g = topk_knn(np.ones((6, 3)), 3)
        assert g.indices[0].tolist() == [1, 2, 3]
        assert g.indices[4].tolist() == [0, 1, 2]
        np.testing.assert_allclose(g.weights, 1.0)

    def test_orthogonal_rows(self):
        g = topk_knn(np.eye(5), 2)
        np.testing.assert_array_equal(g.weights, 0.0)
        assert g.indices[0].tolist() == [1, 2]
        assert g.indices[1].tolist() == [0, 2]

    def test_zero_rows_have_zero_similarity(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        g = topk_knn(x, 2)
        assert np.all(np.isfinite(g.weights))
        assert g.neighbors(1)[1] == (0, 0.0)

    def test_clamps_k(self, caplog):
        g = topk_knn(np.random.default_rng(0).standard_normal((4, 2)), 10)
        assert g.k == 3
        assert "clamping" in caplog.text

    def test_no_self_edges(self):
        g = topk_knn(np.random.default_rng(1).standard_normal((20, 4)), 5)
        assert not np.any(g.indices == np.arange(20)[:, None])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(2, 40)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, 3))
        g = topk_knn(x, k)
        neigh, w = _brute_neighbors(x, k)
        for r in range(n):
            assert sorted(g.indices[r].tolist()) == neigh[r]
            for c, s in g.neighbors(r):
                assert abs(s - w[r, c]) <= 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((15, 4))
        scaled = x * rng.uniform(0.1, 10.0, size=(15, 1))
        a, b = topk_knn(x, 4), topk_knn(scaled, 4)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-9)

    def test_blocked_scan_matches_single_block(self):
        x = np.random.default_rng(4).standard_normal((50, 6))
        a, b = topk_knn(x, 5, block=7), topk_knn(x, 5)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_allclose(a.weights, b.weights, rtol=0, atol=1e-14)

    def test_softmax_transform(self):
        g = KnnGraph(2, 1, np.array([[1], [0]]), np.array([[0.3], [0.9]]))
        d = g.to_sparse("softmax").to_dense()
        np.testing.assert_allclose(d, [[0, 1], [1, 0]])
        g2 = KnnGraph(3, 2, np.array([[1, 2], [0, 2], [0, 1]]), np.full((3, 2), 0.4))
        np.testing.assert_allclose(g2.to_sparse("softmax").to_dense()[0], [0, 0.5, 0.5])


def test_dump_triplets(tmp_path):
    a = normalize_sym(build_adjacency(random_table(np.random.default_rng(0), 2, 2)))
    dump_triplets(a, tmp_path / "a.tsv")
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert len(lines) == a.nnz
    r, c, v = lines[0].split("\t")
    assert a.to_dense()[int(r), int(c)] == float(v)
