"""Partial eigendecomposition of the graph Laplacian and block design matrices.

The leading Laplacian eigenvectors (smallest eigenvalues) form a smooth basis
over the graph; a vertex-varying coefficient is expanded on the first
``rank`` of them.  Stacking one such block per predictor, each scaled by the
predictor values, yields the design matrix the GLM engine consumes.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

DEFAULT_MAX_RANK_CAP = 250


@dataclass
class SpectralBasis:
    """First ``k`` Laplacian eigenpairs in ascending eigenvalue order.

    ``vectors`` is column-orthonormal; the first column spans the constant
    vector on each connected component (eigenvalue 0).  Eigenvector signs
    follow a fixed convention (first non-negligible entry positive) so the
    basis is deterministic across runs.
    """

    eigenvalues: np.ndarray  # (k,) ascending, >= 0
    vectors: np.ndarray      # (n, k) orthonormal columns

    @property
    def k(self):
        return len(self.eigenvalues)

    @property
    def n_vertices(self):
        return self.vectors.shape[0]


def default_max_rank(n_vertices):
    """Default basis size: min(n - 1, 250)."""
    return min(n_vertices - 1, DEFAULT_MAX_RANK_CAP)


def _fix_signs(vectors):
    vectors = np.array(vectors, copy=True)
    for col in range(vectors.shape[1]):
        v = vectors[:, col]
        big = np.abs(v) > 1e-8 * np.abs(v).max()
        idx = np.flatnonzero(big)
        if idx.size and v[idx[0]] < 0:
            vectors[:, col] = -v
    return vectors


def eigenbasis(lap, k, dense_cutoff=2000):
    """First ``k`` eigenpairs of the Laplacian, smallest eigenvalues first.

    Uses a dense symmetric solver below ``dense_cutoff`` vertices and a
    shift-invert Lanczos solver above it.  Residual and orthonormality are
    verified; a failed solve raises with the residual it achieved.
    """
    L = lap.laplacian
    n = L.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if n <= dense_cutoff or k >= n - 1:
        dense = L.toarray()
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, k - 1])
    else:
        # L is PSD so L - sigma*I is positive definite for sigma < 0,
        # making shift-invert safe even with zero eigenvalues present.
        scale = lap.degrees.mean() if lap.degrees.size else 1.0
        sigma = -1e-3 * max(scale, 1e-8)
        try:
            vals, vecs = spla.eigsh(L.tocsc(), k=k, sigma=sigma, which="LM")
        except spla.ArpackNoConvergence as exc:
            got = len(exc.eigenvalues)
            raise RuntimeError(
                f"eigensolver converged only {got}/{k} pairs; residual report: "
                f"eigenvalues={exc.eigenvalues!r}"
            ) from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    scale = max(np.abs(L.data).max() if L.nnz else 1.0, 1e-30)
    vals = np.where((vals < 0) & (vals > -1e-10 * scale), 0.0, vals)
    if vals.min() < -1e-10 * scale:
        raise RuntimeError(f"negative eigenvalue {vals.min():.3e} from a PSD Laplacian")
    vecs = _fix_signs(vecs)
    resid = np.abs(L @ vecs - vecs * vals).max()
    if resid > 1e-8 * scale:
        raise RuntimeError(f"eigen-residual {resid:.3e} exceeds 1e-8 * |L|max ({scale:.3e})")
    gram_err = np.abs(vecs.T @ vecs - np.eye(k)).max()
    if gram_err > 1e-8:
        raise RuntimeError(f"eigenvectors not orthonormal, max Gram error {gram_err:.3e}")
    return SpectralBasis(eigenvalues=vals, vectors=vecs)


@dataclass
class DesignMatrix:
    """Block design ``[B0 | diag(x_1) B1 | ...]`` from basis vectors.

    Block ``j`` holds the first ``ranks[j]`` eigenvectors scaled by predictor
    ``j`` (the intercept block, ``j = 0``, uses the raw eigenvectors).  A rank
    of zero drops the block.
    """

    matrix: np.ndarray            # (n, sum(ranks))
    ranks: np.ndarray             # (p + 1,)
    covariates: np.ndarray        # (n, p)
    basis: SpectralBasis
    block_slices: list

    @property
    def n_predictors(self):
        return len(self.ranks)

    def block(self, j):
        return self.matrix[:, self.block_slices[j]]


def build_design(covariates, basis, ranks):
    """Assemble the block design matrix for given per-predictor ranks."""
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    ranks = np.asarray(ranks, dtype=int)
    if len(ranks) != p + 1:
        raise ValueError(f"need {p + 1} ranks (intercept + {p} covariates), got {len(ranks)}")
    if np.any(ranks < 0) or np.any(ranks > basis.k):
        raise ValueError(f"ranks must lie in [0, {basis.k}], got {ranks.tolist()}")
    if basis.n_vertices != n:
        raise ValueError("covariate rows must match the basis vertex count")
    blocks = []
    slices = []
    start = 0
    for j, r in enumerate(ranks):
        if j == 0:
            blk = basis.vectors[:, :r]
        else:
            blk = X[:, j - 1][:, None] * basis.vectors[:, :r]
        blocks.append(blk)
        slices.append(slice(start, start + r))
        start += r
    matrix = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return DesignMatrix(matrix=matrix, ranks=ranks, covariates=X, basis=basis, block_slices=slices)


def vertex_coefficients(theta, design):
    """Per-vertex coefficient surfaces, one row per predictor.

    Row ``j`` is the vertex-indexed effect of predictor ``j`` recovered from
    its expansion coefficients; the linear predictor satisfies
    ``sum_j x_jv * surface[j, v] == design.matrix @ theta``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != design.matrix.shape[1]:
        raise ValueError("theta length must equal the design column count")
    n = design.matrix.shape[0]
    surfaces = np.zeros((design.n_predictors, n))
    for j, sl in enumerate(design.block_slices):
        r = design.ranks[j]
        if r:
            surfaces[j] = design.basis.vectors[:, :r] @ theta[sl]
    return surfaces


def roughness_matrix(design, lap):
    """Smoothness penalty core ``D' L D`` for a design matrix (symmetrized)."""
    D = design.matrix if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    A = D.T @ (lap.laplacian @ D)
    return (A + A.T) / 2.0


def basis_fingerprint(graph, k):
    """Stable hash of (graph topology, distances, weights, k) for cache keys."""
    h = hashlib.sha256()
    h.update(np.int64(graph.n_vertices).tobytes())
    h.update(np.ascontiguousarray(graph.src).tobytes())
    h.update(np.ascontiguousarray(graph.dst).tobytes())
    h.update(np.ascontiguousarray(graph.distances).tobytes())
    h.update(np.ascontiguousarray(graph.weights).tobytes())
    h.update(np.int64(k).tobytes())
    return h.hexdigest()


def save_basis(basis, path, fingerprint):
    save_arrays(path, {"eigenvalues": basis.eigenvalues, "vectors": basis.vectors},
                meta={"fingerprint": fingerprint})


def load_basis(path):
    arrays, meta = load_arrays(path)
    basis = SpectralBasis(eigenvalues=arrays["eigenvalues"], vectors=arrays["vectors"])
    return basis, (meta or {}).get("fingerprint")


def cached_eigenbasis(lap, graph, k, cache_path, dense_cutoff=2000):
    """Eigendecompose with a file cache keyed by the graph fingerprint."""
    key = basis_fingerprint(graph, k)
    if cache_path is not None and cache_path.exists():
        try:
            basis, stored = load_basis(cache_path)
            if stored == key:
                log.info("basis cache hit (%s)", cache_path)
                return basis
        except Exception:
            log.warning("unreadable basis cache at %s, recomputing", cache_path)
    basis = eigenbasis(lap, k, dense_cutoff=dense_cutoff)
    if cache_path is not None:
        save_basis(basis, cache_path, key)
    return basis
