"""Road-graph preprocessing: adjacency, normalized Laplacian, spectra.

The eigendecomposition runs once per graph as preprocessing (cyclic Jacobi,
double precision); gradients never flow into the spectral basis, only into
the small MLP that maps it to the spatial embedding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ConvergenceError, DimensionError

Edge = tuple[int, int, float]


@dataclass
class GraphSpec:
    """A processed sensor graph: connectivity plus its spectral summary."""

    n: int
    edges: list[Edge]
    adjacency: np.ndarray
    laplacian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    spectral_basis: Optional[np.ndarray] = None


def build_adjacency(edges: Sequence[Edge], n: int, mode: str = "binary") -> np.ndarray:
    """Dense N x N adjacency from an edge list.

    binary: 1 where an edge exists. gaussian_kernel: exp(-cost^2 / sigma^2)
    with sigma the std of all costs, entries below 0.1 dropped. Duplicate
    edges keep the max weight, the diagonal is forced to 0, and the result is
    symmetrized as max(A, A^T) so the spectral machinery sees an undirected
    graph.
    """
    if mode not in ("binary", "gaussian_kernel"):
        raise ContractError(f"unknown adjacency mode {mode!r}")
    a = np.zeros((n, n), dtype=np.float64)
    costs = np.array([c for _, _, c in edges], dtype=np.float64)
    if mode == "gaussian_kernel" and costs.size:
        sigma = costs.std()
        if sigma == 0.0:
            sigma = 1.0
    for i, j, cost in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"edge ({i}, {j}) outside [0, {n})")
        if mode == "binary":
            w = 1.0
        else:
            w = float(np.exp(-(cost * cost) / (sigma * sigma)))
            if w < 0.1:
                w = 0.0
        a[i, j] = max(a[i, j], w)
    np.fill_diagonal(a, 0.0)
    return np.maximum(a, a.T)


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """I - D^{-1/2} A D^{-1/2}; isolated nodes get an identity row."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    if np.abs(a - a.T).max(initial=0.0) > 1e-10:
        raise ContractError("adjacency must be symmetric")
    if a.min(initial=0.0) < 0.0:
        raise ContractError("adjacency weights must be nonnegative")
    if np.abs(np.diagonal(a)).max(initial=0.0) != 0.0:
        raise ContractError("adjacency diagonal must be zero")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(a.shape[0]) - (inv_sqrt[:, None] * a) * inv_sqrt[None, :]


def symmetric_eigh(m: np.ndarray, tol: float = 1e-12,
                   max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues ascending, eigenvector columns). Rotations repeat
    until the off-diagonal Frobenius norm drops below ``tol``; hitting
    ``max_sweeps`` first raises ConvergenceError. Eigenvector signs are
    canonicalized: the largest-magnitude component of each column is positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"eigh input must be square, got {a.shape}")
    n = a.shape[0]
    if np.abs(a - a.T).max(initial=0.0) >= 1e-10:
        raise ContractError("eigh input must be symmetric within 1e-10")
    a = (a + a.T) / 2.0
    u = np.eye(n)

    def off_norm() -> float:
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.linalg.norm(off))

    converged = n < 2 or off_norm() < tol
    for _ in range(max_sweeps):
        if converged:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(tau * tau + 1.0)) if tau != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ rot
                u[:, [p, q]] = u[:, [p, q]] @ rot
        if off_norm() < tol:
            converged = True
    if not converged:
        raise ConvergenceError(
            f"Jacobi sweeps exhausted ({max_sweeps}), off-diagonal residual {off_norm():.3e}")

    eigvals = np.diagonal(a).copy()
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order]
    u = u[:, order]
    for k in range(n):
        col = u[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, k] = -col
    return eigvals, u


def spectral_basis(graph: GraphSpec, k_r: int = 32) -> np.ndarray:
    """The k_r smallest nontrivial eigenvectors of the Laplacian, as columns.

    Eigenvalues below 1e-8 are trivial (one per connected component) and
    skipped. If fewer than k_r nontrivial columns exist the result is padded
    with zero columns and a warning is issued.
    """
    nontrivial = graph.eigenvalues >= 1e-8
    cols = graph.eigenvectors[:, nontrivial][:, :k_r]
    if cols.shape[1] < k_r:
        warnings.warn(
            f"graph has only {cols.shape[1]} nontrivial eigenvectors; "
            f"padding spectral basis to {k_r} with zero columns",
            RuntimeWarning, stacklevel=2)
        pad = np.zeros((graph.n, k_r - cols.shape[1]))
        cols = np.concatenate([cols, pad], axis=1)
    return cols


def build_graph(edges: Sequence[Edge], n: int, mode: str = "binary",
                k_r: int = 32) -> GraphSpec:
    """Run the full preprocessing pipeline on an edge list."""
    a = build_adjacency(edges, n, mode)
    lap = normalized_laplacian(a)
    eigvals, eigvecs = symmetric_eigh(lap)
    spec = GraphSpec(n=n, edges=list(edges), adjacency=a, laplacian=lap,
                     eigenvalues=eigvals, eigenvectors=eigvecs)
    spec.spectral_basis = spectral_basis(spec, k_r)
    return spec


def component_count(n: int, edges: Sequence[Edge]) -> int:
    """Number of connected components, via union-find on the undirected edges."""
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    count = n
    for i, j, _ in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            count -= 1
    return count


@dataclass
class SpatialEmbeddingParams:
    """Bias-free two-layer map from the spectral basis to node embeddings."""

    w1: T.Tensor  # k_r x hidden
    w2: T.Tensor  # hidden x D


def spatial_embedding(z: T.Tensor, params: SpatialEmbeddingParams) -> T.Tensor:
    """M^s = relu(Z W1) W2, one D-dim embedding per node."""
    if z.shape[-1] != params.w1.shape[0]:
        raise DimensionError(
            f"spectral basis width {z.shape[-1]} does not match W1 rows {params.w1.shape[0]}")
    return T.matmul(T.relu(T.matmul(z, params.w1)), params.w2)
