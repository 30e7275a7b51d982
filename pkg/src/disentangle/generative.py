"""The linear mixing process x = A s + eta and its exact posterior over s."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .linalg_stats import inv_spd, symmetrize


@dataclass(frozen=True)
class MixingModel:
    """Sources s ~ N(0, I_k) mixed by ``A`` (N x k) plus noise eta ~ N(0, I_N)."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if not np.all(np.isfinite(A)):
            raise ValueError("mixing matrix has non-finite entries")
        N, k = A.shape
        if not N >= k >= 1:
            raise ValueError(f"need N >= k >= 1, got N={N}, k={k}")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @classmethod
    def paper(cls, N: int = 128, k: int = 2) -> "MixingModel":
        """A_ij = (1 + delta_ij) / 2."""
        return cls(0.5 * (1.0 + np.eye(N, k)))

    @classmethod
    def localization(cls) -> "MixingModel":
        """A_ij = 2 delta_ij + 0.73 with N = k = 2."""
        return cls(2.0 * np.eye(2) + 0.73)

    @classmethod
    def random(cls, N: int, k: int, seed: int, scale: float = 1.0) -> "MixingModel":
        g = _rng.stream(seed, "mixing", N, k)
        return cls(scale * _rng.normal(g, (N, k)))


@dataclass(frozen=True)
class PosteriorMap:
    """Linear-Gaussian posterior N(F x, E)."""

    F: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        E = symmetrize(np.atleast_2d(np.asarray(self.E, dtype=float)))
        if E.shape != (F.shape[0], F.shape[0]):
            raise ValueError(f"E shape {E.shape} incompatible with F shape {F.shape}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "E", E)


def data_covariance(m: MixingModel) -> np.ndarray:
    return m.A @ m.A.T + np.eye(m.N)


def linear_gaussian_posterior(W: np.ndarray) -> PosteriorMap:
    """Posterior of z given x for z ~ N(0, I), x | z ~ N(W z, I)."""
    W = np.atleast_2d(W)
    E = inv_spd(W.T @ W + np.eye(W.shape[1]))
    return PosteriorMap(F=E @ W.T, E=E)


def ground_truth_posterior(m: MixingModel) -> PosteriorMap:
    return linear_gaussian_posterior(m.A)


def sample_data(m: MixingModel, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` i.i.d. pairs; returns (S, X) with shapes (n, k) and (n, N)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = _rng.stream(seed, "sample_data", m.N, m.k)
    S = _rng.normal(g, (n, m.k))
    noise = _rng.normal(g, (n, m.N))
    return S, S @ m.A.T + noise
