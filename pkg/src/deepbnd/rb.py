"""POD reduced bases of boundary traces.

Bases are orthonormal in the boundary L2 inner product given by a mass
matrix ``M``. Construction follows the snapshot method: eigen-decompose the
``N_s x N_s`` correlation matrix and combine snapshots with the eigenvectors.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

RANK_CUTOFF = 1e-12


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    basis: np.ndarray        # (n_gamma, n_rb)
    eigenvalues: np.ndarray  # all N_s correlation eigenvalues, descending
    mass: sp.spmatrix
    load: int = 1
    mesh_hash: str = ""

    @property
    def n_rb(self) -> int:
        return self.basis.shape[1]

    @property
    def n_gamma(self) -> int:
        return self.basis.shape[0]

    def truncate(self, n: int) -> "ReducedBasis":
        if not 0 <= n <= self.n_rb:
            raise ValueError(f"cannot keep {n} of {self.n_rb} basis functions")
        return replace(self, basis=self.basis[:, :n].copy())

    def gram(self) -> np.ndarray:
        return self.basis.T @ (self.mass @ self.basis)


def correlation(snapshots, mass) -> np.ndarray:
    """``C_ij = (w_i, w_j)_M / N_s`` for snapshots stored as rows."""
    W = np.asarray(snapshots, dtype=np.float64)
    C = W @ (mass @ W.T) / W.shape[0]
    return 0.5 * (C + C.T)


def pod(snapshots, mass, tol: float | None = None, n_rb: int | None = None,
        load: int = 1, mesh_hash: str = "") -> ReducedBasis:
    """POD basis of the rows of ``snapshots``.

    Give either ``tol`` (keep the smallest ``n`` with relative discarded
    energy ``< tol``) or ``n_rb``; with neither, every mode above the rank
    cutoff is kept.
    """
    W = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    ns, ng = W.shape
    if ns < 1:
        raise ValueError("need at least one snapshot")
    if mass.shape != (ng, ng):
        raise ValueError(f"mass matrix {mass.shape} does not match traces of length {ng}")
    if tol is not None and n_rb is not None:
        raise ValueError("give tol or n_rb, not both")
    if tol is not None and not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    lam, V = np.linalg.eigh(correlation(W, mass))
    order = np.argsort(lam, kind="stable")[::-1]
    lam, V = lam[order], V[:, order]
    if lam[0] <= 0.0:
        warnings.warn("snapshot matrix is zero; returning an empty basis", RuntimeWarning)
        return ReducedBasis(np.zeros((ng, 0)), np.zeros(ns), mass, load, mesh_hash)
    rank = int(np.sum(lam >= RANK_CUTOFF * lam[0]))
    if tol is not None:
        total = lam[lam > 0].sum()
        n = rank
        for k in range(1, rank + 1):
            if 1.0 - lam[:k].sum() / total < tol:
                n = k
                break
    elif n_rb is not None:
        if n_rb < 0:
            raise ValueError("n_rb must be nonnegative")
        n = min(int(n_rb), rank)
    else:
        n = rank
    xi = (W.T @ V[:, :n]) / np.sqrt(lam[:n] * ns)
    # deterministic signs: first clearly nonzero entry positive
    for j in range(n):
        col = xi[:, j]
        k = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())[0]
        if col[k] < 0:
            xi[:, j] = -col
    # the correlation matrix is PSD; negative eigenvalues are round-off
    return ReducedBasis(xi, np.clip(lam, 0.0, None), mass, load, mesh_hash)


def pod_error(basis: ReducedBasis, n: int) -> float:
    """Mean squared projection error with ``n`` modes: the eigenvalue tail sum."""
    lam = basis.eigenvalues
    if not 0 <= n <= lam.size:
        raise ValueError(f"n must lie in [0, {lam.size}]")
    return float(max(lam[n:].sum(), 0.0))


def project(w, basis: ReducedBasis) -> np.ndarray:
    """Coefficients ``beta_i = xi_i^T M w``; works on rows of a 2D array."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != basis.n_gamma:
        raise ValueError(f"trace length {w.shape[-1]} does not match basis ({basis.n_gamma})")
    return (basis.mass @ w.T).T @ basis.basis


def reconstruct(beta, basis: ReducedBasis) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return beta @ basis.basis.T


def projection_mse(snapshots, basis: ReducedBasis, n: int) -> float:
    """Mean of ``||w - P_n w||_M^2`` over snapshot rows."""
    b = basis.truncate(n)
    W = np.atleast_2d(snapshots)
    R = W - reconstruct(project(W, b), b)
    return float(np.mean(np.einsum("ij,ij->i", R, (basis.mass @ R.T).T)))


def rotate_basis(basis: ReducedBasis, bd) -> ReducedBasis:
    """Quarter-turn each basis function (axial load 1 -> vertical load 2)."""
    bd.check_symmetric()
    if bd.n_values != basis.n_gamma:
        raise ValueError("boundary discretisation does not match the basis")
    return replace(basis, basis=bd.rotate(basis.basis), load=2)


def admissibility_correct(basis_vectors, bd):
    """Remove the affine part carrying each function's boundary moment.

    Returns ``(xi_prime, eps_tilde)``: ``xi' = xi - A y`` with
    ``A = <xi (x) n>`` over the boundary, and ``eps_tilde`` the Voigt form of
    ``sym(A)`` (one column per basis function). Works on a single trace too.
    """
    X = np.asarray(basis_vectors, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[:, None]
    y = bd.coords - bd.mesh.centroid
    G = bd.moment_operator() / bd.mesh.area
    A = (G @ X).T.reshape(-1, 2, 2)   # per column
    affine = np.einsum("kij,nj->nik", A, y).reshape(bd.n_values, -1)
    Xp = X - affine
    eps = np.stack([A[:, 0, 0], A[:, 1, 1], A[:, 0, 1] + A[:, 1, 0]])
    if single:
        return Xp[:, 0], eps[:, 0]
    return Xp, eps


def symmetric_moment(trace, bd) -> np.ndarray:
    """Voigt-ordered ``<w (x)^s n>`` as (m11, m22, m12)."""
    M = bd.boundary_moment(trace)
    return np.array([M[0, 0], M[1, 1], 0.5 * (M[0, 1] + M[1, 0])])
