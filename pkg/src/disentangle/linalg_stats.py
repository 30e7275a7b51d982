"""Dense SPD factorisation, Gaussian KL and the matrix identities used downstream.

All SPD solves and log-determinants go through :func:`cholesky_spd`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

# Asymmetry tolerated (and removed) before factorising; larger is a bug.
SYMMETRY_TOL = 1e-10
# Slack allowed below zero for KL-type quantities.
KL_SLACK = 1e-12


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


def symmetrize(M: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3g})")
    return 0.5 * (M + M.T)


def cholesky_spd(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (nearly) symmetric positive definite matrix."""
    S = symmetrize(M)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite") from exc


def solve_spd(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    L = cholesky_spd(M)
    return sla.cho_solve((L, True), B)


def inv_spd(M: np.ndarray) -> np.ndarray:
    return solve_spd(M, np.eye(np.shape(M)[0]))


def logdet_spd(M: np.ndarray) -> float:
    """ln det M from the Cholesky diagonal (never via a raw determinant)."""
    L = cholesky_spd(M)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        cov = symmetrize(cov)
        cholesky_spd(cov)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def diagonal(cls, mean, var) -> "GaussianMoments":
        return cls(mean, np.diag(np.asarray(var, dtype=float)))


def gaussian_kl(q: GaussianMoments, p: GaussianMoments) -> float:
    """KL(q || p) between two multivariate normals."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    Lp = cholesky_spd(p.cov)
    Lq = cholesky_spd(q.cov)
    d = q.dim
    # Tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    tr = float(np.sum(sla.solve_triangular(Lp, Lq, lower=True) ** 2))
    diff = sla.solve_triangular(Lp, p.mean - q.mean, lower=True)
    maha = float(diff @ diff)
    logdet_ratio = 2.0 * float(np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.diag(Lq))))
    return 0.5 * (tr + maha - d + logdet_ratio)


def woodbury_inverse(B: np.ndarray, U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """(B + U V)^-1 computed as B^-1 - B^-1 U (I + V B^-1 U)^-1 V B^-1."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    k = U.shape[1]
    Binv_U = np.linalg.solve(B, U)
    V_Binv = np.linalg.solve(B.T, V.T).T
    small = np.eye(k) + V @ Binv_U
    Binv = np.linalg.inv(B)
    return Binv - Binv_U @ np.linalg.solve(small, V_Binv)


def push_through(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of (I_N + U V)^-1 U = U (I_k + V U)^-1."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    N, k = U.shape
    lhs = np.linalg.solve(np.eye(N) + U @ V, U)
    # U (I + VU)^-1 = ((I + VU)^-T U^T)^T
    rhs = np.linalg.solve((np.eye(k) + V @ U).T, U.T).T
    return lhs, rhs


def kl_diag_rows(mu: np.ndarray, var: np.ndarray, target_mean: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Row-wise KL(N(mu_n, diag(var_n)) || N(target_mean_n, E)) for (n, k) arrays."""
    L = cholesky_spd(E)
    E_inv = sla.cho_solve((L, True), np.eye(E.shape[0]))
    k = mu.shape[1]
    diff = target_mean - mu
    maha = np.einsum("ni,ij,nj->n", diff, E_inv, diff)
    tr = var @ np.diag(E_inv)
    logdet_E = 2.0 * np.sum(np.log(np.diag(L)))
    return 0.5 * (tr + maha - k + logdet_E - np.sum(np.log(var), axis=1))
