"""Command-line entry point: ``sweep``, ``train-deep``, ``gen-data`` and ``check``.

Configuration is layered: built-in defaults, then ``--preset``, then a flat
``key = value`` file given by ``--config``, then ``--set key=value`` and the
dedicated flags. The effective configuration is written to
``config.resolved`` in the output directory and can be fed back via
``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import rng as _rng
from .data_io import (
    IdxError,
    load_dataset,
    load_idx_images,
    make_localization_dataset,
    save_dataset,
    standardize,
    synthetic_digits,
)
from .generative import MixingModel

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("disentangle")


class UsageError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SOLVER_KEYS = {"mode": str, "grad_tol": float, "max_iters": int, "restarts": int, "init_scale": float}
_TRAIN_KEYS = {
    "epochs": int, "lr": float, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "batch_size": int, "mc_samples_eval": int,
}

SCHEMA = {
    "sweep": {
        **_SOLVER_KEYS, "seed": int, "n": int, "k": int, "a": float, "grid": str, "warm_start": _bool,
    },
    "train-deep": {
        **_TRAIN_KEYS, "seed": int, "betas": str, "realizations": int, "n_samples": int,
        "heldout": int, "hidden": str, "digits": str, "dataset": str,
    },
    "gen-data": {"seed": int, "n_samples": int, "digits": str},
    "check": {"seed": str, "only": str},
}

DEFAULTS = {
    "sweep": {
        "mode": "reduced", "grad_tol": 1e-9, "max_iters": 200_000, "restarts": 8, "init_scale": 0.1,
        "seed": 0, "n": 128, "k": 2, "a": 1.0, "grid": "0.1:10:41:log", "warm_start": True,
    },
    "train-deep": {
        "epochs": 200, "lr": 1e-3, "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
        "batch_size": 100, "mc_samples_eval": 1000, "seed": 0, "betas": "0.3,1,3",
        "realizations": 5, "n_samples": 1000, "heldout": 200, "hidden": "256,200,200",
        "digits": "synthetic", "dataset": "",
    },
    "gen-data": {"seed": 0, "n_samples": 1000, "digits": "synthetic"},
    "check": {"seed": "0", "only": ""},
}

PRESETS = {
    "paper-fig3": ("sweep", {"n": 128, "k": 2, "a": 1.0, "grid": "0.1:10:41:log", "mode": "reduced"}),
    "desk": ("train-deep", {"betas": "0.3,1,3", "realizations": 5, "epochs": 200, "n_samples": 1000}),
}


def read_config_file(path) -> dict:
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _coerce(command: str, raw: dict) -> dict:
    schema = SCHEMA[command]
    out = {}
    for key, val in raw.items():
        if key not in schema:
            raise UsageError(f"unknown config key {key!r} for {command}; known: {', '.join(sorted(schema))}")
        try:
            out[key] = schema[key](val)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return out


def resolve_config(command: str, args) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "preset", None):
        target, values = PRESETS[args.preset]
        if target != command:
            raise UsageError(f"preset {args.preset} belongs to {target}")
        cfg.update(values)
    if args.config:
        try:
            cfg.update(_coerce(command, read_config_file(args.config)))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    for key in SCHEMA[command]:
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[key] = str(flag)
    cfg.update(_coerce(command, overrides))
    return cfg


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_resolved(cfg: dict, out_dir: Path) -> None:
    lines = [f"{k} = {_fmt_value(cfg[k])}" for k in sorted(cfg)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_grid(text: str) -> list[float]:
    """Comma list (``0.5,1,2``) or ``lo:hi:count:log`` / ``lo:hi:count:lin``."""
    text = text.strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 4 or parts[3] not in ("log", "lin"):
                raise UsageError(f"grid range must be lo:hi:count:log|lin, got {text!r}")
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
            if count < 1 or lo <= 0 or hi <= 0:
                raise UsageError("grid needs count >= 1 and positive bounds")
            if parts[3] == "log":
                grid = np.logspace(np.log10(lo), np.log10(hi), count)
            else:
                grid = np.linspace(lo, hi, count)
        else:
            grid = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"cannot parse grid {text!r}: {exc}") from None
    if grid.size == 0:
        raise UsageError("empty grid")
    if np.any(grid <= 0):
        raise UsageError("grid values must be positive")
    if np.any(np.diff(grid) <= 0):
        raise UsageError("grid must be strictly increasing")
    return [float(v) for v in grid]


def _out_dir(args, command: str) -> Path:
    out = args.out or os.environ.get("DISENTANGLE_OUT") or os.path.join("out", command)
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return path


def paper_mixing(n: int, k: int, a: float) -> MixingModel:
    """A_ij = a (1 + delta_ij) / 2."""
    return MixingModel(a * 0.5 * (1.0 + np.eye(n, k)))


# ---- sweep -------------------------------------------------------------------

def cmd_sweep(args) -> int:
    from .linear_bvae import SolverConfig
    from .sweep import (
        SweepFailed, argmax_near_one, export_csv, fixed_decoder_sweep, plot_sweep, proposition_report,
        run_sweep,
    )

    cfg = resolve_config("sweep", args)
    grid = parse_grid(cfg["grid"])
    try:
        m = paper_mixing(cfg["n"], cfg["k"], cfg["a"])
        solver = SolverConfig(**{k: cfg[k] for k in _SOLVER_KEYS}, seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args, "sweep")
    write_resolved(cfg, out)
    try:
        if solver.mode == "fixed_decoder":
            records = fixed_decoder_sweep(m, m.A, grid, solver, cfg["warm_start"])
        else:
            records = run_sweep(m, grid, solver, cfg["warm_start"])
    except SweepFailed as exc:
        print(f"FAIL solver: {exc}")
        return EXIT_CHECK
    export_csv(records, out / "sweep.csv")
    plot_sweep(records, out)

    lines, failures = [], []
    for r in records:
        if len(records) <= 5:
            b = r.bundle
            lines.append(f"beta={r.beta:.6g} elbo={b.elbo:.10g} mie={b.mie:.3g} tie={b.tie:.3g} "
                         f"residual={r.residual:.2g}")
    n_conv = sum(r.converged for r in records)
    if n_conv < len(records):
        lines.append(f"{len(records) - n_conv} grid points excluded (not converged)")
    mies = [r.bundle.mie for r in records]
    if solver.mode == "fixed_decoder":
        i = int(np.argmin(mies))
        lines.append(f"MIE argmin beta = {grid[i]:.6g}")
        if len(grid) >= 3 and grid[0] <= 1.0 <= grid[-1] and not argmax_near_one(records, grid[i]):
            failures.append(f"fixed-decoder MIE argmin at beta={grid[i]:.6g}, not next to 1")
    elif len(records) >= 3 and grid[0] <= 1.0 <= grid[-1]:
        rep = proposition_report(records)
        for key, val in rep.__dict__.items():
            lines.append(f"{key} = {_fmt_value(val) if not isinstance(val, float) else format(val, '.6g')}")
        failures = rep.failures(argmax_near_one(records, rep.prop3_argmax_beta))
    else:
        lines.append("proposition checks skipped: need >= 3 grid points spanning beta = 1")
    lines += [f"FAIL {f}" for f in failures]
    lines.append("all checks passed" if not failures else f"{len(failures)} check(s) failed")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_CHECK if failures else EXIT_OK


# ---- data --------------------------------------------------------------------

def _digits(source: str):
    if source == "synthetic":
        return synthetic_digits()
    try:
        return load_idx_images(source)
    except (OSError, IdxError) as exc:
        raise UsageError(f"cannot load digits from {source}: {exc}") from None


def cmd_gen_data(args) -> int:
    cfg = resolve_config("gen-data", args)
    if cfg["n_samples"] < 1:
        raise UsageError("n must be >= 1")
    out = _out_dir(args, "gen-data")
    write_resolved(cfg, out)
    ds = make_localization_dataset(_digits(cfg["digits"]), cfg["n_samples"], cfg["seed"])
    save_dataset(ds, out)
    A = np.array2string(ds.mixing.A, separator=",").replace("\n", "")
    print(f"n={ds.n} seed={ds.seed} A={A}")
    return EXIT_OK


# ---- train-deep ----------------------------------------------------------------

DEEP_CSV = "deep_sweep.csv"


def _cell_seed(seed: int, beta: float, realization: int) -> int:
    return int(_rng.stream(seed, "deep_cell", float(beta), int(realization)).integers(2**63))


def _train_cell(job):
    from .deep_bvae import Divergence, MlpVae, TrainConfig, evaluate, save_model, train

    X, P, X_al, P_al, A, beta, r, cfg, model_dir = job
    seed = _cell_seed(cfg["seed"], beta, r)
    tcfg = TrainConfig(beta=beta, seed=seed, **{k: cfg[k] for k in _TRAIN_KEYS})
    hidden = tuple(int(h) for h in cfg["hidden"].split(","))
    net = MlpVae.init(X.shape[1], A.shape[1], seed, hidden=hidden)
    try:
        net, trace = train(net, X, tcfg)
    except Divergence as exc:
        raise Divergence(f"cell beta={beta:g} realization={r}: {exc}") from None
    rec = evaluate(net, MixingModel(A), X, P, tcfg, realization=r, align=(X_al, P_al))
    save_model(net, Path(model_dir) / f"beta{beta:g}_r{r}.bvae")
    return rec, trace, net


def _write_deep_csv(records, path: Path) -> None:
    from .deep_bvae import DEEP_CSV_FIELDS

    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEEP_CSV_FIELDS)
        for r in records:
            w.writerow([_fmt_value(float(r.beta)), r.realization, _fmt_value(r.elbo), _fmt_value(r.recon),
                        _fmt_value(r.ci_loss), _fmt_value(r.tie), _fmt_value(r.recon_se)])


def summarize_deep(records) -> dict:
    """Per-beta means over realizations: {beta: {elbo, recon, ci_loss, tie}}."""
    out = {}
    for beta in sorted({r.beta for r in records}):
        rs = [r for r in records if r.beta == beta]
        out[beta] = {f: float(np.mean([getattr(r, f) for r in rs])) for f in ("elbo", "recon", "ci_loss", "tie")}
    return out


def deep_ordering(summary: dict) -> dict:
    """The three desk-scale ordering properties, evaluated on per-beta means."""
    betas = sorted(summary)
    recon = [summary[b]["recon"] for b in betas]
    ci = [summary[b]["ci_loss"] for b in betas]
    elbo = [summary[b]["elbo"] for b in betas]
    return {
        "recon strictly decreasing": bool(np.all(np.diff(recon) < 0)),
        "ci_loss strictly decreasing": bool(np.all(np.diff(ci) < 0)),
        "elbo maximal at beta=1": 1.0 in summary and betas[int(np.argmax(elbo))] == 1.0,
    }


def _plot_deep(records, summary, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for field in ("elbo", "recon", "ci_loss", "tie"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([r.beta for r in records], [getattr(r, field) for r in records], s=10, alpha=0.5)
        betas = sorted(summary)
        ax.plot(betas, [summary[b][field] for b in betas], marker="o", color="k")
        ax.set_xscale("log")
        ax.set_xlabel("beta")
        ax.set_ylabel(field)
        fig.tight_layout()
        fig.savefig(out / f"deep_{field}.png", metadata={"Software": None})
        plt.close(fig)


def _save_reconstructions(nets, X, mean, std, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .deep_bvae import decode, encode

    show = X[:6]
    rows = [("input", show)]
    for beta, net in nets:
        mu, _ = encode(net, show)
        rows.append((f"beta={beta:g}", decode(net, mu)))
    fig, axes = plt.subplots(len(rows), len(show), figsize=(1.2 * len(show), 1.3 * len(rows)))
    axes = np.atleast_2d(axes)
    for i, (label, imgs) in enumerate(rows):
        for j in range(len(show)):
            ax = axes[i, j]
            ax.imshow((imgs[j] * std + mean).reshape(40, 40), cmap="gray", vmin=0, vmax=255)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[i, 0].set_ylabel(label, fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "reconstructions.png", metadata={"Software": None})
    plt.close(fig)


def cmd_train_deep(args) -> int:
    from .deep_bvae import Divergence

    cfg = resolve_config("train-deep", args)
    try:
        betas = parse_grid(cfg["betas"])
    except UsageError as exc:
        raise UsageError(f"betas: {exc}") from None
    if cfg["realizations"] < 1:
        raise UsageError("realizations must be >= 1")
    out = _out_dir(args, "train-deep")

    if cfg["dataset"]:
        data_dir = Path(cfg["dataset"])
        if not (data_dir / "dataset.csv").exists():
            if args.no_generate:
                raise UsageError(f"no dataset at {data_dir} and --no-generate was given")
            ds = make_localization_dataset(_digits(cfg["digits"]), cfg["n_samples"], cfg["seed"])
            save_dataset(ds, data_dir)
        ds = load_dataset(data_dir)
    else:
        if args.no_generate:
            raise UsageError("--no-generate needs an existing dataset (--dataset DIR)")
        ds = make_localization_dataset(_digits(cfg["digits"]), cfg["n_samples"], cfg["seed"])
    write_resolved(cfg, out)

    X, mean, std = standardize(ds.images)
    held_seed = int(_rng.stream(cfg["seed"], "heldout").integers(2**63))
    held = make_localization_dataset(_digits(cfg["digits"]), cfg["heldout"], held_seed, ds.mixing)
    X_al = (held.images - mean) / std

    model_dir = out / "models"
    model_dir.mkdir(exist_ok=True)
    jobs = [(X, ds.positions, X_al, held.positions, ds.mixing.A, b, r, cfg, str(model_dir))
            for b in betas for r in range(cfg["realizations"])]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_train_cell, jobs))
        else:
            results = [_train_cell(j) for j in jobs]
    except Divergence as exc:
        print(f"FAIL training diverged: {exc}")
        return EXIT_CHECK

    records = [res[0] for res in results]
    _write_deep_csv(records, out / DEEP_CSV)
    with (out / "loss_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("beta", "realization", "epoch", "objective"))
        for (rec, trace, _), job in zip(results, jobs):
            for e, v in enumerate(trace):
                w.writerow([_fmt_value(float(rec.beta)), rec.realization, e, _fmt_value(float(v))])
    summary = summarize_deep(records)
    _plot_deep(records, summary, out)
    _save_reconstructions([(res[0].beta, res[2]) for res in results if res[0].realization == 0], X, mean, std, out)

    lines = [f"beta={b:g} " + " ".join(f"{k}={v:.6g}" for k, v in s.items()) for b, s in summary.items()]
    if len(summary) >= 3:
        lines += [f"{'ok  ' if ok else 'FAIL'} {name}" for name, ok in deep_ordering(summary).items()]
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


# ---- check ---------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed text {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def cmd_check(args) -> int:
    from .checks import SUITE, run_suite

    cfg = resolve_config("check", args)
    seeds = parse_seeds(cfg["seed"])
    only = [s.strip() for s in cfg["only"].split(",") if s.strip()]
    unknown = [s for s in only if s not in SUITE]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; choose from {', '.join(SUITE)}")
    out = _out_dir(args, "check")
    write_resolved(cfg, out)
    rows = run_suite(seeds, only)
    with (out / "checks.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "check", "observed", "threshold", "passed"))
        for seed, r in rows:
            w.writerow([seed, r.name, _fmt_value(float(r.observed)), _fmt_value(float(r.threshold)),
                        "true" if r.passed else "false"])
    width = max(len(r.name) for _, r in rows)
    print(f"{'seed':>4}  {'check':<{width}}  {'observed':>11}  {'threshold':>10}  result")
    for seed, r in rows:
        print(f"{seed:>4}  {r.name:<{width}}  {r.observed:>11.3g}  {r.threshold:>10.3g}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r for _, r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---- parser --------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", metavar="DIR", help="output directory (default $DISENTANGLE_OUT or out/<command>)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent experiment cells")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disentangle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="linear beta-VAE sweep and monotonicity checks")
    _common(p)
    p.add_argument("--preset", choices=["paper-fig3"])
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", help="comma list or lo:hi:count:log")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--a", type=float, help="scale of A_ij = a (1 + delta_ij) / 2")
    p.add_argument("--mode", choices=["reduced", "full", "fixed_decoder"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-deep", help="train MLP beta-VAEs on the localisation dataset")
    _common(p)
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("--seed", type=int)
    p.add_argument("--betas", help="comma list or lo:hi:count:log")
    p.add_argument("--realizations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", dest="n_samples", type=int, help="dataset size")
    p.add_argument("--dataset", metavar="DIR", help="load (or create) the dataset here")
    p.add_argument("--digits", metavar="IDX", help="MNIST IDX image file instead of the bundled glyphs")
    p.add_argument("--no-generate", action="store_true", help="fail if the dataset is missing")
    p.set_defaults(func=cmd_train_deep)

    p = sub.add_parser("gen-data", help="write the localisation dataset")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", dest="n_samples", type=int)
    p.add_argument("--digits", metavar="IDX")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check", help="run the oracle self-test suite")
    _common(p)
    p.add_argument("--seed", help="seed, comma list, or range lo..hi")
    p.add_argument("--only", help="comma list of check groups")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
