"""Self-validation suite: every closed form against an independent oracle.

Each check returns :class:`CheckResult` rows of (observed, threshold). The
command-line ``check`` subcommand prints them as a table.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .deep_bvae import MlpVae, loss_and_grad
from .generative import MixingModel, data_covariance, ground_truth_posterior, sample_data
from .linalg_stats import push_through, woodbury_inverse
from .linear_bvae import LinearVaeParams, SolverConfig, integrated_loss, loss_gradient, solve_stationary
from .metrics import MetricBundle, mc_oracle_bundle, metric_bundle
from .sweep import SweepRecord, check_proposition1, check_proposition2, fixed_decoder_sweep

METRIC_NAMES = ("elbo", "recon", "ci_loss", "mie", "tie")


@dataclass(frozen=True)
class CheckResult:
    name: str
    observed: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.observed) and self.observed <= self.threshold)


def random_params(N: int, k: int, g: np.random.Generator, scale: float = 0.3) -> LinearVaeParams:
    """Generic parameters with every block nonzero (bD stays zero for the model posterior)."""
    n = _rng.normal
    return LinearVaeParams(
        Wmu=scale * n(g, (k, N)), bmu=scale * n(g, k),
        Wsigma=0.5 * scale * n(g, (k, N)), bsigma=-0.5 + 0.3 * n(g, k),
        D=scale * n(g, (N, k)) + 0.5, bD=np.zeros(N),
    )


def fd_relative_error(f, x: np.ndarray, g_analytic: np.ndarray, h: float = 1e-6) -> float:
    """Largest per-coordinate |g - fd| / max(|g|, |fd|, 1) with central differences."""
    fd = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (f(xp) - f(xm)) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g_analytic)), 1.0)
    return float(np.max(np.abs(fd - g_analytic) / denom))


def check_posterior(seed: int, n: int = 100_000) -> list[CheckResult]:
    m = MixingModel.random(4, 2, seed)
    post = ground_truth_posterior(m)
    S, X = sample_data(m, n, seed)
    C = np.cov(np.hstack([S, X]).T)
    Cxx, Csx, Css = C[2:, 2:], C[:2, 2:], C[:2, :2]
    F_mc = np.linalg.solve(Cxx, Csx.T).T
    E_mc = Css - F_mc @ Csx.T
    return [
        CheckResult("posterior F vs MC regression", float(np.max(np.abs(F_mc - post.F))), 0.02),
        CheckResult("posterior E vs MC residual cov", float(np.max(np.abs(E_mc - post.E))), 0.02),
        CheckResult("posterior E = I - F A", float(np.max(np.abs(post.E - (np.eye(2) - post.F @ m.A)))), 1e-10),
    ]


def check_identities(seed: int, count: int = 100) -> list[CheckResult]:
    g = _rng.stream(seed, "identities")
    wb = pt = 0.0
    for _ in range(count):
        N = int(g.integers(2, 9))
        k = int(g.integers(1, N + 1))
        U = 0.5 * _rng.normal(g, (N, k))
        Q = _rng.normal(g, (N, N))
        B = Q @ Q.T / N + np.eye(N)
        direct = np.linalg.inv(B + U @ U.T)
        wb = max(wb, float(np.max(np.abs(woodbury_inverse(B, U, U.T) - direct)) / max(1.0, np.max(np.abs(direct)))))
        lhs, rhs = push_through(U, 0.5 * _rng.normal(g, (k, N)))
        pt = max(pt, float(np.max(np.abs(lhs - rhs))))
    return [CheckResult("Woodbury inverse", wb, 1e-10), CheckResult("push-through", pt, 1e-10)]


def check_linear_gradients(seed: int, count: int = 20) -> list[CheckResult]:
    g = _rng.stream(seed, "linear_gradients")
    worst = 0.0
    for _ in range(count):
        N, k = int(g.integers(1, 6)), int(g.integers(1, 4))
        k = min(k, N)
        m = MixingModel.random(N, k, int(g.integers(2**31)))
        Sigma = data_covariance(m)
        p = random_params(N, k, g).replace(bD=0.2 * _rng.normal(g, N))
        beta = float(np.exp(_rng.normal(g, 1)[0]))
        grad = loss_gradient(p, Sigma, beta).flatten()
        worst = max(worst, fd_relative_error(
            lambda v: integrated_loss(p.unflatten(v), Sigma, beta), p.flatten(), grad))
    return [CheckResult("linear loss_gradient vs central FD", worst, 1e-6)]


def check_deep_gradients(seed: int, count: int = 3) -> list[CheckResult]:
    g = _rng.stream(seed, "deep_gradients")
    worst = 0.0
    for i in range(count):
        net = MlpVae.init(4, 2, int(g.integers(2**31)), hidden=(5, 4, 3))
        X = _rng.normal(g, (3, 4))
        eps = _rng.normal(g, (3, 2))
        beta = float(np.exp(_rng.normal(g, 1)[0]))
        _, grad = loss_and_grad(net, X, beta, eps)
        worst = max(worst, fd_relative_error(
            lambda v: loss_and_grad(net.unflatten(v), X, beta, eps)[0], net.flatten(), grad.flatten()))
    return [CheckResult("deep loss_and_grad vs central FD", worst, 1e-5)]


def check_oracle(seed: int, count: int = 3, n_x: int = 20_000) -> list[CheckResult]:
    """Closed-form metrics against the sampling oracle, as a worst z-score."""
    g = _rng.stream(seed, "oracle")
    worst = {name: 0.0 for name in METRIC_NAMES}
    for _ in range(count):
        N = int(g.integers(1, 6))
        k = int(g.integers(1, N + 1))
        m = MixingModel.random(N, k, int(g.integers(2**31)))
        p = random_params(N, k, g)
        beta = float(np.exp(_rng.normal(g, 1)[0]))
        closed = metric_bundle(p, m, beta)
        est, se = mc_oracle_bundle(p, m, beta, n_x=n_x, seed=int(g.integers(2**31)))
        for name in METRIC_NAMES:
            z = abs(getattr(closed, name) - getattr(est, name)) / max(getattr(se, name), 1e-300)
            worst[name] = max(worst[name], z)
    return [CheckResult(f"{name} closed form vs MC (z-score)", z, 3.0) for name, z in worst.items()]


def check_scalar(seed: int) -> list[CheckResult]:
    m = MixingModel(np.array([[1.0]]))
    sp = solve_stationary(m, 1.0, SolverConfig(seed=seed))
    p = sp.params
    b = metric_bundle(p, m, 1.0)
    err = max(abs(abs(p.D[0, 0]) - 1.0), abs(abs(p.Wmu[0, 0]) - 0.5), abs(p.bsigma[0] + np.log(2.0)))
    return [
        CheckResult("scalar optimum parameters", float(err), 1e-6),
        CheckResult("scalar optimum MIE, TIE", float(max(abs(b.mie), abs(b.tie))), 1e-8),
    ]


def check_fixed_decoder(seed: int) -> list[CheckResult]:
    """MIE over beta in {1/4, 1/2, 1, 2, 4} with D fixed at A; distance of the argmin from beta = 1."""
    grid = [0.25, 0.5, 1.0, 2.0, 4.0]
    out = []
    for label, m in (("scalar", MixingModel(np.array([[1.0]]))), ("N=8,k=2", MixingModel.paper(8, 2))):
        recs = fixed_decoder_sweep(m, m.A, grid, SolverConfig(seed=seed, restarts=4))
        i = int(np.argmin([r.bundle.mie for r in recs]))
        out.append(CheckResult(f"fixed-decoder MIE argmin |log2 beta| ({label})", abs(np.log2(grid[i])), 0.0))
    return out


def _planted(values_ci, values_loss):
    return [
        SweepRecord(float(b), MetricBundle(elbo=0.0, recon=0.0, ci_loss=c, mie=0.0, tie=0.0, loss_value=L), 0.0, True, 0)
        for b, c, L in zip(np.linspace(0.5, 2.0, len(values_ci)), values_ci, values_loss)
    ]


def check_planted(seed: int) -> list[CheckResult]:
    """The monotonicity checks must see a planted bump and pass its removal."""
    g = _rng.stream(seed, "planted")
    n = 9
    ci = np.sort(_rng.uniform_open(g, n))[::-1] + 1.0
    loss = -np.cumsum(ci)
    bump = int(g.integers(1, n - 1))
    ci_bad = ci.copy()
    ci_bad[bump] = ci[bump - 1] + 0.1
    loss_bad = loss.copy()
    loss_bad[bump] = loss[bump - 1] + 0.1
    clean = _planted(ci, loss)
    dirty = _planted(ci_bad, loss_bad)
    miss = 0.0
    if check_proposition2(clean)[0] > 0 or check_proposition1(clean)[0] > 0:
        miss += 1
    if not check_proposition2(dirty)[0] > 0.05:
        miss += 1
    if not check_proposition1(dirty)[0] > 0.05:
        miss += 1
    return [CheckResult("planted violations detected / clean passes (misses)", miss, 0.0)]


SUITE = {
    "posterior": check_posterior,
    "identities": check_identities,
    "gradients": lambda s: check_linear_gradients(s) + check_deep_gradients(s),
    "oracle": check_oracle,
    "scalar": check_scalar,
    "fixed_decoder": check_fixed_decoder,
    "planted": check_planted,
}


def run_suite(seeds, only=None) -> list[tuple[int, CheckResult]]:
    names = list(SUITE) if not only else list(only)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; choose from {sorted(SUITE)}")
    return [(seed, r) for seed in seeds for name in names for r in SUITE[name](seed)]
