"""Beta sweeps of the linear model and numerical checks of the beta-monotonicity results."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .generative import MixingModel
from .linear_bvae import SolverConfig, StationaryPoint, solve_stationary
from .metrics import MetricBundle, metric_bundle

log = logging.getLogger(__name__)

CSV_FIELDS = ("beta", "loss", "elbo", "mie", "tie", "recon", "ci_loss", "residual", "converged", "seed")
MAX_NONCONVERGED_FRACTION = 0.10
MONOTONE_RTOL = 1e-6
ENVELOPE_RTOL = 5e-2


class SweepFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepRecord:
    beta: float
    bundle: MetricBundle
    residual: float
    converged: bool
    seed: int
    point: Optional[StationaryPoint] = None


@dataclass(frozen=True)
class PropositionReport:
    prop1_max_violation: float
    prop1_envelope_max_relerr: float
    prop2_max_violation: float
    prop2_recon_max_violation: float
    prop3_argmax_beta: float
    mie_argmin_beta: float
    mie_is_interior: bool
    scale: float
    n_excluded: int

    def failures(self, grid_step_ok: bool = True) -> list[str]:
        tol = MONOTONE_RTOL * self.scale
        out = []
        if self.prop1_max_violation > tol:
            out.append(f"prop1 monotonicity: {self.prop1_max_violation:.3g} > {tol:.3g}")
        if self.prop1_envelope_max_relerr > ENVELOPE_RTOL:
            out.append(f"prop1 envelope: {self.prop1_envelope_max_relerr:.3g} > {ENVELOPE_RTOL}")
        if self.prop2_max_violation > tol:
            out.append(f"prop2 ci_loss: {self.prop2_max_violation:.3g} > {tol:.3g}")
        if self.prop2_recon_max_violation > tol:
            out.append(f"prop2 recon: {self.prop2_recon_max_violation:.3g} > {tol:.3g}")
        if not grid_step_ok:
            out.append(f"prop3 ELBO argmax at beta={self.prop3_argmax_beta:.6g}, not next to 1")
        if not self.mie_is_interior:
            out.append(f"MIE argmin at grid edge beta={self.mie_argmin_beta:.6g}")
        return out


def log_grid(lo: float = 0.1, hi: float = 10.0, count: int = 41) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), count)


def _check_grid(grid: Sequence[float]) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 1:
        raise ValueError("grid must be a non-empty list of beta values")
    if np.any(g <= 0):
        raise ValueError("grid values must be > 0")
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing")
    return g


def _sweep(m, grid, cfg, warm_start, decoder):
    grid = _check_grid(grid)
    records = []
    prev = None
    for i, beta in enumerate(grid):
        sp = solve_stationary(
            m, float(beta), cfg, warm_start=prev if warm_start else None, decoder=decoder,
        )
        if not sp.converged:
            log.warning("beta=%g did not converge (residual %.3g)", beta, sp.residual)
        bundle = metric_bundle(sp.params, m, float(beta))
        records.append(SweepRecord(float(beta), bundle, sp.residual, sp.converged, cfg.seed, sp))
        prev = sp.params
        log.info("beta=%.6g loss=%.10g elbo=%.10g mie=%.6g residual=%.2g",
                 beta, bundle.loss_value, bundle.elbo, bundle.mie, sp.residual)
    bad = sum(not r.converged for r in records)
    if bad > MAX_NONCONVERGED_FRACTION * len(records):
        raise SweepFailed(f"{bad} of {len(records)} grid points did not converge")
    return records


def run_sweep(
    m: MixingModel, grid: Sequence[float], cfg: SolverConfig = SolverConfig(), warm_start: bool = True,
) -> list[SweepRecord]:
    """Solve the linear model at every beta in ``grid`` (ascending).

    Each solve runs ``cfg.restarts`` fresh starts, plus a warm start from the
    previous beta's optimum when ``warm_start`` is set.
    """
    if cfg.mode == "fixed_decoder":
        raise ValueError("use fixed_decoder_sweep for the fixed-decoder mode")
    return _sweep(m, grid, cfg, warm_start, None)


def fixed_decoder_sweep(
    m: MixingModel, D_fixed, grid: Sequence[float], cfg: SolverConfig = SolverConfig(),
    warm_start: bool = True,
) -> list[SweepRecord]:
    cfg = replace(cfg, mode="fixed_decoder")
    return _sweep(m, grid, cfg, warm_start, np.asarray(D_fixed, dtype=float))


def _converged(records, minimum):
    good = [r for r in records if r.converged]
    if len(good) < minimum:
        raise ValueError(f"need at least {minimum} converged records, got {len(good)}")
    return good


def _worst_increase(values) -> float:
    return float(np.max(np.diff(values)))


def check_proposition1(records) -> tuple[float, float]:
    """Worst forward increase of L*(beta) and worst relative envelope error.

    The envelope error compares the central difference of L* at each interior
    grid point with -ci_loss there.
    """
    good = _converged(records, 3)
    betas = np.array([r.beta for r in good])
    L = np.array([r.bundle.loss_value for r in good])
    ci = np.array([r.bundle.ci_loss for r in good])
    slope = (L[2:] - L[:-2]) / (betas[2:] - betas[:-2])
    target = -ci[1:-1]
    relerr = np.abs(slope - target) / np.maximum(np.abs(target), 1e-300)
    return _worst_increase(L), float(np.max(relerr))


def check_proposition2(records) -> tuple[float, float]:
    """Worst forward increase of ci_loss and of the reconstruction objective."""
    good = _converged(records, 2)
    ci = [r.bundle.ci_loss for r in good]
    recon = [r.bundle.recon for r in good]
    return _worst_increase(ci), _worst_increase(recon)


def check_proposition3(records) -> tuple[float, float, bool]:
    """(beta maximising ELBO, beta minimising MIE, whether that minimum is interior)."""
    good = _converged(records, 3)
    betas = np.array([r.beta for r in good])
    if not betas[0] <= 1.0 <= betas[-1]:
        raise ValueError("grid must span beta = 1")
    elbo = np.array([r.bundle.elbo for r in good])
    mie = np.array([r.bundle.mie for r in good])
    i_min = int(np.argmin(mie))
    interior = 0 < i_min < len(mie) - 1 and mie[i_min] < mie[0] and mie[i_min] < mie[-1]
    return float(betas[int(np.argmax(elbo))]), float(betas[i_min]), bool(interior)


def argmax_near_one(records, argmax_beta: float) -> bool:
    """True if ``argmax_beta`` is the grid point nearest 1 or one of its neighbours."""
    betas = np.array([r.beta for r in records if r.converged])
    i_one = int(np.argmin(np.abs(np.log(betas))))
    i_max = int(np.argmin(np.abs(betas - argmax_beta)))
    return abs(i_max - i_one) <= 1


def proposition_report(records) -> PropositionReport:
    good = [r for r in records if r.converged]
    p1, env = check_proposition1(records)
    p2, p2r = check_proposition2(records)
    amax, amin, interior = check_proposition3(records)
    return PropositionReport(
        prop1_max_violation=p1,
        prop1_envelope_max_relerr=env,
        prop2_max_violation=p2,
        prop2_recon_max_violation=p2r,
        prop3_argmax_beta=amax,
        mie_argmin_beta=amin,
        mie_is_interior=interior,
        scale=float(max(abs(r.bundle.loss_value) for r in good)),
        n_excluded=len(records) - len(good),
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_csv(records, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            b = r.bundle
            w.writerow([
                _fmt(r.beta), _fmt(b.loss_value), _fmt(b.elbo), _fmt(b.mie), _fmt(b.tie),
                _fmt(b.recon), _fmt(b.ci_loss), _fmt(r.residual),
                "true" if r.converged else "false", str(int(r.seed)),
            ])


def read_csv(path) -> list[SweepRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            recon, ci, beta = float(row["recon"]), float(row["ci_loss"]), float(row["beta"])
            bundle = MetricBundle(
                elbo=float(row["elbo"]), recon=recon, ci_loss=ci, mie=float(row["mie"]),
                tie=float(row["tie"]), loss_value=float(row["loss"]),
            )
            out.append(SweepRecord(beta, bundle, float(row["residual"]),
                                   row["converged"] == "true", int(row["seed"])))
    return out


def plot_sweep(records, out_dir) -> list[Path]:
    """Four PNG panels: ELBO, MIE/TIE, reconstruction, conditional-independence loss."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    betas = [r.beta for r in records]
    get = lambda name: [getattr(r.bundle, name) for r in records]  # noqa: E731
    panels = [
        ("elbo.png", "ELBO", [("ELBO", get("elbo"))]),
        ("mie_tie.png", "inference error", [("MIE", get("mie")), ("TIE", get("tie"))]),
        ("recon.png", "reconstruction objective", [("recon", get("recon"))]),
        ("ci_loss.png", "conditional independence loss", [("KL", get("ci_loss"))]),
    ]
    paths = []
    for fname, ylabel, series in panels:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, ys in series:
            ax.plot(betas, ys, marker=".", label=label)
        if fname == "elbo.png":
            ax.axvline(betas[int(np.argmax(get("elbo")))], ls="--", color="grey")
        ax.set_xscale("log")
        ax.set_xlabel("beta")
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
