"""Sparse bipartite adjacency, symmetric normalisation and top-k cosine graphs."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionTable

log = logging.getLogger(__name__)

TIE_DECIMALS = 12


@dataclass
class SparseAdjacency:
    """Square CSR matrix with sorted column indices in every row."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    val: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    @classmethod
    def from_scipy(cls, m: sp.spmatrix) -> "SparseAdjacency":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got {m.shape}")
        return cls(
            m.shape[0],
            m.indptr.astype(np.int64),
            m.indices.astype(np.int64),
            m.data.astype(np.float64),
        )

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.val, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "SparseAdjacency":
        return SparseAdjacency.from_scipy(self.to_scipy().T)

    def degrees(self) -> np.ndarray:
        """Number of stored entries per row."""
        return np.diff(self.row_ptr)


def build_adjacency(train: InteractionTable) -> SparseAdjacency:
    """Unnormalised ``[[0, R], [R^T, 0]]`` with unit weights."""
    if len(train) == 0:
        raise ValueError("cannot build an adjacency from an empty table")
    nu, ni = train.n_users, train.n_items
    u = train.pairs[:, 0]
    i = train.pairs[:, 1] + nu
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    m = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nu + ni, nu + ni))
    return SparseAdjacency.from_scipy(m)


def normalize_sym(adj: SparseAdjacency) -> SparseAdjacency:
    """``D^-1/2 A D^-1/2``; zero-degree rows stay empty."""
    deg = adj.degrees().astype(np.float64)
    rows = np.repeat(np.arange(adj.n), np.diff(adj.row_ptr))
    # every stored entry has both endpoints at degree >= 1
    val = 1.0 / np.sqrt(deg[rows] * deg[adj.col_idx])
    return SparseAdjacency(adj.n, adj.row_ptr.copy(), adj.col_idx.copy(), val)


def spmm(adj: SparseAdjacency, x: np.ndarray) -> np.ndarray:
    """Sparse @ dense. Each row is summed over ascending column index."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != adj.n:
        raise ValueError(f"dimension mismatch: matrix is {adj.n}x{adj.n}, operand {x.shape}")
    return adj.to_scipy() @ x


@dataclass
class KnnGraph:
    """Row-wise top-k neighbour lists; ``indices``/``weights`` have shape (n, k)."""

    n: int
    k: int
    indices: np.ndarray
    weights: np.ndarray

    def neighbors(self, row: int) -> list[tuple[int, float]]:
        return [(int(j), float(w)) for j, w in zip(self.indices[row], self.weights[row])]

    def to_sparse(self, transform: str = "raw") -> SparseAdjacency:
        """Neighbour weights as a square CSR matrix.

        ``transform`` is ``"raw"`` (cosine weights as stored), ``"softmax"``
        (row softmax over the retained weights) or ``"rownorm"`` (divide by
        the row's absolute weight sum).
        """
        w = self.weights.astype(np.float64)
        if transform == "softmax":
            e = np.exp(w - w.max(axis=1, keepdims=True))
            w = e / e.sum(axis=1, keepdims=True)
        elif transform == "rownorm":
            s = np.abs(w).sum(axis=1, keepdims=True)
            w = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
        elif transform != "raw":
            raise ValueError(f"unknown transform {transform!r}")
        rows = np.repeat(np.arange(self.n), self.k)
        m = sp.coo_matrix((w.ravel(), (rows, self.indices.ravel())), shape=(self.n, self.n))
        return SparseAdjacency.from_scipy(m)


def cosine_similarity(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine; rows with zero norm have similarity 0 to everything."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    xn = x / safe[:, None]
    xn[norms == 0] = 0.0
    return xn @ xn.T


def topk_knn(x: np.ndarray, k: int, block: int = 2048) -> KnnGraph:
    """Exact top-k cosine neighbours per row, self excluded, ties to lower index."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2:
        raise ValueError("need at least two rows")
    if k >= n:
        log.warning("k=%d >= n=%d; clamping to %d", k, n, n - 1)
        k = n - 1
    norms = np.linalg.norm(x, axis=1)
    xn = x / np.where(norms > 0, norms, 1.0)[:, None]
    xn[norms == 0] = 0.0

    indices = np.empty((n, k), dtype=np.int64)
    weights = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        sim = xn[start:stop] @ xn.T
        rows = np.arange(stop - start)
        sim[rows, rows + start] = -np.inf
        # similarities equal to TIE_DECIMALS places count as ties, so rounding
        # noise from different summation orders cannot reorder them; the
        # stable sort then keeps lower indices first
        order = np.argsort(-np.round(sim, TIE_DECIMALS), axis=1, kind="stable")[:, :k]
        indices[start:stop] = order
        weights[start:stop] = np.take_along_axis(sim, order, axis=1)
    return KnnGraph(n, k, indices, weights)


def dump_triplets(adj: SparseAdjacency, path: str | Path) -> None:
    """Write nonzeros as ``row<TAB>col<TAB>value`` lines for inspection."""
    rows = np.repeat(np.arange(adj.n), np.diff(adj.row_ptr))
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, v in zip(rows, adj.col_idx, adj.val):
            fh.write(f"{int(r)}\t{int(c)}\t{float(v)!r}\n")
