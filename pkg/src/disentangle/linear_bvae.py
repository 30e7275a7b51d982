"""Analytically tractable beta-VAE: linear encoder/decoder with data integrated out.

The encoder maps x to N(Wmu x + bmu, diag(exp(Wsigma x + bsigma))), the decoder
to N(D z + bD, I_N). With x ~ N(0, Sigma_x) the objective has the closed form
implemented by :func:`integrated_loss` (additive constants dropped), and its
stationary points are located by :func:`solve_stationary`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng as _rng
from .generative import MixingModel, PosteriorMap, data_covariance, linear_gaussian_posterior
from .linalg_stats import GaussianMoments

# exp() of anything above this overflows float64 soon after; refuse rather than clamp.
MAX_EXPONENT = 700.0

BLOCKS = ("Wmu", "bmu", "Wsigma", "bsigma", "D", "bD")
MODES = ("reduced", "full", "fixed_decoder")
_FREE = {
    "reduced": ("Wmu", "D"),
    "full": ("Wmu", "Wsigma", "bsigma", "D"),
    "fixed_decoder": ("Wmu", "Wsigma", "bsigma"),
}


class ExponentOverflow(FloatingPointError):
    pass


@dataclass(frozen=True)
class LinearVaeParams:
    Wmu: np.ndarray
    bmu: np.ndarray
    Wsigma: np.ndarray
    bsigma: np.ndarray
    D: np.ndarray
    bD: np.ndarray
    sigma_y2: float = 1.0

    def __post_init__(self):
        if self.sigma_y2 != 1.0:
            raise ValueError("sigma_y2 is fixed to 1")
        arrs = {}
        for name in BLOCKS:
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            arrs[name] = a
        k, N = arrs["Wmu"].shape
        expected = {
            "bmu": (k,), "Wsigma": (k, N), "bsigma": (k,), "D": (N, k), "bD": (N,),
        }
        for name, shape in expected.items():
            if arrs[name].shape != shape:
                raise ValueError(f"{name} has shape {arrs[name].shape}, expected {shape}")
        for name, a in arrs.items():
            object.__setattr__(self, name, a)

    @property
    def k(self) -> int:
        return self.Wmu.shape[0]

    @property
    def N(self) -> int:
        return self.Wmu.shape[1]

    @classmethod
    def zeros(cls, N: int, k: int) -> "LinearVaeParams":
        return cls(
            Wmu=np.zeros((k, N)), bmu=np.zeros(k), Wsigma=np.zeros((k, N)),
            bsigma=np.zeros(k), D=np.zeros((N, k)), bD=np.zeros(N),
        )

    def replace(self, **changes) -> "LinearVaeParams":
        return replace(self, **changes)

    def blocks(self, names=BLOCKS) -> list[np.ndarray]:
        return [getattr(self, n) for n in names]

    def flatten(self, names=BLOCKS) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in names])

    def unflatten(self, vec: np.ndarray, names=BLOCKS) -> "LinearVaeParams":
        changes, i = {}, 0
        for n in names:
            a = getattr(self, n)
            changes[n] = np.asarray(vec[i:i + a.size]).reshape(a.shape)
            i += a.size
        return replace(self, **changes)


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "reduced"
    grad_tol: float = 1e-9
    max_iters: int = 200_000
    restarts: int = 8
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class StationaryPoint:
    params: LinearVaeParams
    beta: float
    loss: float
    residual: float
    converged: bool
    iterations: int = 0
    n_converged: int = 0
    trace: list = field(default_factory=list, repr=False, compare=False)


def _check_beta(beta: float):
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")


def encode(p: LinearVaeParams, x) -> GaussianMoments:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    arg = p.Wsigma @ x + p.bsigma
    if np.any(arg > MAX_EXPONENT):
        raise ExponentOverflow(f"log-variance {arg.max():.4g} exceeds {MAX_EXPONENT}")
    return GaussianMoments.diagonal(p.Wmu @ x + p.bmu, np.exp(arg))


def _avg_variance_exponent(p: LinearVaeParams, Sigma_x: np.ndarray) -> np.ndarray:
    """1/2 [Wsigma Sigma_x Wsigma^T]_ii + bsigma_i, i.e. ln E_x[exp(Wsigma x + bsigma)]_i."""
    v = np.einsum("ij,jk,ik->i", p.Wsigma, Sigma_x, p.Wsigma)
    arg = 0.5 * v + p.bsigma
    if np.any(arg > MAX_EXPONENT):
        raise ExponentOverflow(f"averaged log-variance {arg.max():.4g} exceeds {MAX_EXPONENT}")
    return arg


def reconstruction_error_trace(p: LinearVaeParams, Sigma_x: np.ndarray) -> float:
    """Tr[(D Wmu - I) Sigma_x (D Wmu - I)^T] without forming N x N products."""
    P = p.Wmu @ Sigma_x
    G = p.D.T @ p.D
    return float(np.sum(G * (P @ p.Wmu.T)) - 2.0 * np.trace(P @ p.D) + np.trace(Sigma_x))


def integrated_loss(p: LinearVaeParams, Sigma_x: np.ndarray, beta: float) -> float:
    """Data-averaged beta-VAE objective (to be maximised), constants dropped.

    Equals E_x[recon - beta * KL] + N/2 ln(2 pi) - beta k / 2.
    """
    _check_beta(beta)
    e = np.exp(_avg_variance_exponent(p, Sigma_x))
    c = np.sum(p.D * p.D, axis=0)
    r = p.D @ p.bmu + p.bD
    q = (
        reconstruction_error_trace(p, Sigma_x)
        + beta * float(np.sum((p.Wmu @ Sigma_x) * p.Wmu))
        + float(np.sum((c + beta) * e))
        + float(r @ r)
        + beta * float(p.bmu @ p.bmu)
        - beta * float(np.sum(p.bsigma))
    )
    return -0.5 * q


def loss_gradient(p: LinearVaeParams, Sigma_x: np.ndarray, beta: float) -> LinearVaeParams:
    """Gradient of :func:`integrated_loss`, returned block-for-block as a params object.

    At a stationary point every block vanishes; the sign convention is that of
    the maximised quantity, so ascent moves along the returned direction.
    """
    _check_beta(beta)
    k, N = p.Wmu.shape
    e = np.exp(_avg_variance_exponent(p, Sigma_x))
    c = np.sum(p.D * p.D, axis=0)
    r = p.D @ p.bmu + p.bD
    P = p.Wmu @ Sigma_x
    G = p.D.T @ p.D
    g_Wmu = -((G + beta * np.eye(k)) @ P - p.D.T @ Sigma_x)
    g_D = -(p.D @ (P @ p.Wmu.T) - P.T + np.outer(r, p.bmu) + p.D * e)
    g_bmu = -(p.D.T @ r + beta * p.bmu)
    g_bD = -r
    g_Wsigma = -0.5 * ((c + beta) * e)[:, None] * (p.Wsigma @ Sigma_x)
    g_bsigma = -0.5 * ((c + beta) * e - beta)
    return LinearVaeParams(
        Wmu=g_Wmu, bmu=g_bmu, Wsigma=g_Wsigma, bsigma=g_bsigma, D=g_D, bD=g_bD,
    )


def optimal_bsigma(D: np.ndarray, beta: float) -> np.ndarray:
    """Log-variance bias zeroing the bsigma gradient when Wsigma = 0."""
    c = np.sum(D * D, axis=0)
    return np.log(beta / (c + beta))


def model_posterior(p: LinearVaeParams) -> PosteriorMap:
    if np.any(p.bD != 0.0):
        raise ValueError("model posterior is only available for a zero decoder bias")
    return linear_gaussian_posterior(p.D)


def apply_gauge(p: LinearVaeParams, perm, signs) -> LinearVaeParams:
    """Relabel latent axes: new axis j is old axis ``perm[j]`` times ``signs[j]``."""
    perm = np.asarray(perm)
    signs = np.asarray(signs, dtype=float)
    return p.replace(
        D=p.D[:, perm] * signs,
        Wmu=p.Wmu[perm] * signs[:, None],
        bmu=p.bmu[perm] * signs,
        Wsigma=p.Wsigma[perm],
        bsigma=p.bsigma[perm],
    )


def signed_permutations(k: int):
    for perm in itertools.permutations(range(k)):
        for signs in itertools.product((1.0, -1.0), repeat=k):
            yield perm, signs


def canonicalize(p: LinearVaeParams) -> LinearVaeParams:
    """Fix the sign/permutation gauge of the latent axes.

    Columns of D are ordered by descending norm and signed so that each
    column's largest-magnitude entry is positive; encoder rows follow.
    """
    norms = np.linalg.norm(p.D, axis=0)
    order = np.argsort(-norms, kind="stable")
    D = p.D[:, order]
    signs = np.ones(p.k)
    for j in range(p.k):
        col = D[:, j]
        mag = np.abs(col)
        if mag.max() > 0.0:
            # first entry within round-off of the largest, so exact ties
            # (e.g. a column along e1 - e2) resolve the same way every run
            lead = int(np.argmax(mag >= mag.max() * (1.0 - 1e-8)))
            signs[j] = 1.0 if col[lead] > 0 else -1.0
    return apply_gauge(p, order, signs)


class _Problem:
    """Objective restricted to the free blocks of one solver mode.

    Works on raw arrays; the public functions above are the reference path
    and the tests check the two agree.
    """

    def __init__(self, template: LinearVaeParams, Sigma_x, beta, mode):
        self.template = template
        self.S = Sigma_x
        self.S_inv = np.linalg.inv(Sigma_x)
        self.trS = float(np.trace(Sigma_x))
        self.beta = beta
        self.mode = mode
        self.free = _FREE[mode]
        k, N = template.Wmu.shape
        self.k, self.N = k, N
        self._fixed_D = template.D

    def _unpack(self, x):
        k, N = self.k, self.N
        Wmu = x[:k * N].reshape(k, N)
        i = k * N
        if self.mode == "reduced":
            D = x[i:].reshape(N, k)
            return Wmu, None, None, D
        Wsigma = x[i:i + k * N].reshape(k, N)
        bsigma = x[i + k * N:i + k * N + k]
        if self.mode == "full":
            D = x[i + k * N + k:].reshape(N, k)
        else:
            D = self._fixed_D
        return Wmu, Wsigma, bsigma, D

    def params(self, x: np.ndarray) -> LinearVaeParams:
        Wmu, Wsigma, bsigma, D = self._unpack(x)
        if self.mode == "reduced":
            Wsigma = np.zeros_like(Wmu)
            bsigma = optimal_bsigma(D, self.beta)
        return self.template.replace(Wmu=Wmu.copy(), Wsigma=Wsigma.copy(),
                                     bsigma=bsigma.copy(), D=D.copy())

    def evaluate(self, x):
        """Value, gradient over the free blocks, and the scaled ascent direction."""
        beta, S = self.beta, self.S
        Wmu, Wsigma, bsigma, D = self._unpack(x)
        c = np.sum(D * D, axis=0)
        P = Wmu @ S
        G = D.T @ D
        WSW = P @ Wmu.T
        if self.mode == "reduced":
            e = beta / (c + beta)
            kl_log = float(np.sum(np.log(e)))
        else:
            WsS = Wsigma @ S
            arg = 0.5 * np.sum(WsS * Wsigma, axis=1) + bsigma
            if np.any(arg > MAX_EXPONENT):
                raise ExponentOverflow(f"averaged log-variance {arg.max():.4g} exceeds {MAX_EXPONENT}")
            e = np.exp(arg)
            kl_log = float(np.sum(bsigma))
        q = (np.sum(G * WSW) - 2.0 * np.trace(P @ D) + self.trS
             + beta * np.trace(WSW) + np.sum((c + beta) * e) - beta * kl_log)
        value = -0.5 * float(q)

        A = G + beta * np.eye(self.k)
        g_Wmu = -(A @ P - D.T @ S)
        d_Wmu = np.linalg.solve(A, g_Wmu @ self.S_inv)
        grads, dirs = [g_Wmu], [d_Wmu]
        if self.mode != "reduced":
            h = 0.5 * (c + beta) * e
            g_Ws = -h[:, None] * WsS
            g_bs = -(h - 0.5 * beta)
            grads += [g_Ws, g_bs]
            dirs += [(g_Ws @ self.S_inv) / h[:, None], g_bs / h]
        if self.mode != "fixed_decoder":
            g_D = -(D @ WSW - P.T + D * e)
            H = WSW + np.diag(e)
            d_D = np.linalg.solve(H, g_D.T).T
            grads.append(g_D)
            dirs.append(d_D)
        g = np.concatenate([a.ravel() for a in grads])
        d = np.concatenate([a.ravel() for a in dirs])
        return value, g, d


def gradient_ascent(
    evaluate: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    grad_tol: float,
    max_iters: int,
    armijo_c: float = 1e-4,
    callback: Optional[Callable[[int, float], None]] = None,
):
    """Maximise by scaled gradient ascent with a halving (Armijo) line search.

    ``evaluate(x)`` returns ``(f, grad, direction)`` where ``direction`` is the
    gradient premultiplied by a positive definite scaling (pass the gradient
    itself for plain ascent). The trial step combines a unit step with the
    Barzilai-Borwein length from the previous iterate. Accepted iterates never
    decrease f, except by at most a few ulps once the predicted gain drops
    below what f can resolve, where acceptance falls back to "does not get
    worse beyond round-off".
    Returns (x, f(x), ||grad||_inf, iterations).
    """
    x = np.array(x0, dtype=float)
    fx, g, d = evaluate(x)
    res = float(np.max(np.abs(g))) if g.size else 0.0
    x_prev = d_prev = None
    it = 0
    while res > grad_tol and it < max_iters:
        it += 1
        step = 1.0
        if x_prev is not None:
            s = x - x_prev
            y = d_prev - d
            sy = float(s @ y)
            if sy > 0:
                step = max(1.0, float(s @ s) / sy)
        slope = float(g @ d)
        noise = 64.0 * np.finfo(float).eps * (1.0 + abs(fx))
        accepted = False
        t = step
        for _ in range(80):
            x_new = x + t * d
            try:
                f_new, g_new, d_new = evaluate(x_new)
            except (ExponentOverflow, np.linalg.LinAlgError):
                t *= 0.5
                continue
            if f_new >= fx + armijo_c * t * slope:
                accepted = True
                break
            if t * slope < noise and f_new >= fx - noise:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        x_prev, d_prev = x, d
        x, fx, g, d = x_new, f_new, g_new, d_new
        res = float(np.max(np.abs(g)))
        if callback is not None:
            callback(it, fx)
    return x, fx, res, it


def _initial_point(problem: _Problem, scale: float, g: np.random.Generator) -> np.ndarray:
    n = problem.template.flatten(problem.free).size
    return scale * _rng.normal(g, n)


def solve_stationary(
    m: MixingModel,
    beta: float,
    cfg: SolverConfig = SolverConfig(),
    warm_start: Optional[LinearVaeParams] = None,
    decoder: Optional[np.ndarray] = None,
    record_trace: bool = False,
) -> StationaryPoint:
    """Find the best stationary point of the integrated objective at ``beta``.

    ``cfg.restarts`` random starts (plus ``warm_start`` if given) are run; the
    highest-loss converged point wins, ties within 1e-10 going to the lower
    residual. Biases bmu, bD are held at zero, where their gradients vanish.
    In ``fixed_decoder`` mode ``decoder`` supplies D and only the encoder moves.
    """
    _check_beta(beta)
    Sigma_x = data_covariance(m)
    template = LinearVaeParams.zeros(m.N, m.k)
    if cfg.mode == "fixed_decoder":
        if decoder is None:
            raise ValueError("fixed_decoder mode needs a decoder matrix")
        D = np.atleast_2d(np.asarray(decoder, dtype=float))
        if D.shape != (m.N, m.k):
            raise ValueError(f"decoder has shape {D.shape}, expected {(m.N, m.k)}")
        template = template.replace(D=D)
    problem = _Problem(template, Sigma_x, beta, cfg.mode)

    starts = []
    if warm_start is not None:
        starts.append(("warm", warm_start.replace(D=template.D) if cfg.mode == "fixed_decoder"
                       else warm_start))
    for r in range(cfg.restarts):
        starts.append((r, None))

    candidates = []
    total_iters = 0
    for tag, init in starts:
        if init is None:
            g = _rng.stream(cfg.seed, "solve", cfg.mode, float(beta), tag)
            x0 = _initial_point(problem, cfg.init_scale, g)
        else:
            x0 = init.flatten(problem.free)
        trace = []
        cb = (lambda i, fx: trace.append(fx)) if record_trace else None
        x, fx, _, iters = gradient_ascent(problem.evaluate, x0, cfg.grad_tol,
                                          cfg.max_iters, callback=cb)
        total_iters += iters
        p = problem.params(x)
        residual = stationarity_residual(p, Sigma_x, beta, cfg.mode)
        candidates.append((fx, residual, residual <= cfg.grad_tol, p, trace))

    converged = [c for c in candidates if c[2]]
    pool = converged if converged else candidates
    best_loss = max(c[0] for c in pool)
    near = [c for c in pool if c[0] >= best_loss - 1e-10]
    fx, residual, ok, p, trace = min(near, key=lambda c: c[1])
    if cfg.mode != "fixed_decoder":
        p = canonicalize(p)
    return StationaryPoint(
        params=p, beta=float(beta), loss=fx, residual=residual, converged=bool(ok),
        iterations=total_iters, n_converged=len(converged), trace=trace,
    )


def stationarity_residual(p: LinearVaeParams, Sigma_x, beta: float, mode: str = "full") -> float:
    """Infinity norm of the gradient over every block the mode treats as optimised.

    For ``reduced`` and ``full`` that is all six blocks; for ``fixed_decoder``
    the decoder blocks are excluded.
    """
    g = loss_gradient(p, Sigma_x, beta)
    names = ("Wmu", "bmu", "Wsigma", "bsigma") if mode == "fixed_decoder" else BLOCKS
    return float(max(np.max(np.abs(b)) for b in g.blocks(names)))
