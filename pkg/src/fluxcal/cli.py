"""Command-line front end.

Every subcommand writes into an output directory.  Results carry a
provenance header (tool version, seed, configuration and input hashes) and
contain no timestamps, so identical inputs give byte-identical files
whatever ``--jobs`` is.

Exit status: 0 success, 2 bad input, 3 numerical failure, 4 too many failed
bootstrap replicates.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .bootstrap import (base_residuals, drift_sigma2, percentile_interval, residual_bands,
                        run_bootstrap, summarize)
from .calibration import CalibrationRef, apply_calibration, calibrate, legacy_ls_fit
from .errors import (CalibrationDomainError, EnsembleQualityError, OptimizationError,
                     SingularFitError, UnderdeterminedError)
from .estimator import cross_validate, fit_mle
from .model import Mode, expected_reading
from .parallel import default_jobs, map_ordered
from .simulator import (ConjoinerSpec, ScenarioSpec, dataset_seeds, invert_response,
                        simulate_conjoiner, simulate_dataset)

log = logging.getLogger("fluxcal")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_ENSEMBLE = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _json(out, name, payload, prov):
    _write(out, name, fio.dumps({**payload, "provenance": prov}))


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _simulate_one(task):
    scenario, data_seed, overrides = task
    if scenario == "conjoiner":
        obs, design, truth, hyper = simulate_conjoiner(ConjoinerSpec(seed=data_seed))
        truth["hyperparams"] = fio.hyper_to_dict(hyper)
    else:
        spec = ScenarioSpec.table(int(scenario), seed=data_seed, **overrides)
        obs, design, truth = simulate_dataset(spec)
    return obs, design, truth


def cmd_simulate(args) -> int:
    cfg = fio.load_config(args.config)
    if args.scenario not in ("1", "2", "3", "4", "conjoiner"):
        raise fio.InputError(f"unknown scenario {args.scenario!r}; expected 1-4 or conjoiner")
    if args.datasets < 1:
        raise fio.InputError("--datasets must be at least 1")
    overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.scenario.items()}
    seeds = [a for a, _ in dataset_seeds(args.seed, args.datasets)]
    results = map_ordered(_simulate_one, [(args.scenario, s, overrides) for s in seeds],
                          args.jobs)
    out = Path(args.out)
    for d, ((obs, design, truth), s) in enumerate(zip(results, seeds), start=1):
        prov = fio.provenance("simulate", seed=args.seed, config=cfg)
        prov["dataset"] = d
        prov["dataset_seed"] = s
        _write(out, f"dataset_{d:03d}.csv", fio.data_csv(obs, design, provenance=prov))
        _json(out, f"truth_{d:03d}.json", truth, prov)
    return EXIT_OK


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def _load(args):
    cfg = fio.load_config(args.config)
    mode = getattr(args, "mode", None) or cfg.model.get("mode")
    data = fio.read_data(args.data, mode)
    hyper = cfg.hyperparams(data.mode)
    return cfg, data, hyper


def cmd_fit(args) -> int:
    cfg, data, hyper = _load(args)
    opt = cfg.optimizer_config()
    fit = fit_mle(data.observations, data.design, hyper, opt)
    prov = fio.provenance("fit", seed=opt.seed, config=cfg, data=args.data)
    out = Path(args.out)
    payload = fio.fit_to_dict(fit, data, hyper)
    _json(out, "fit.json", payload, prov)
    o = payload["observations"]
    rows = [[int(r), float(f), float(n), float(e)]
            for r, f, n, e in zip(o["run_id"], o["flux"], o["n"], o["residual"])]
    _write(out, "residuals.csv", fio.csv_text(["run_id", "flux", "n", "residual"], rows, prov))
    if not fit.converged:
        raise NumericalFailure(f"optimizer did not converge (gradient norm {fit.grad_norm:.3g})")
    return EXIT_OK


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

def cmd_bootstrap(args) -> int:
    cfg, data, hyper = _load(args)
    opt = cfg.optimizer_config()
    if args.fit:
        base, hyper = fio.fit_from_dict(fio.read_json(args.fit))
        if base.params.phi.size != data.design.n_fluxes:
            raise fio.InputError("fit file does not match the data layout")
    else:
        base = fit_mle(data.observations, data.design, hyper, opt)
    boot = cfg.bootstrap_config(B=args.B, seed=args.seed)
    var = drift_sigma2(boot, data.design.n_fluxes)
    prov = fio.provenance("bootstrap", seed=boot.master_seed, config=cfg, data=args.data,
                          fit=args.fit)
    out = Path(args.out)
    try:
        ens = run_bootstrap(data.observations, data.design, hyper, opt, boot,
                            base_fit=base, jobs=args.jobs)
        quality = None
    except EnsembleQualityError as exc:
        ens, quality = exc.ensemble, exc
    _json(out, "ensemble.json", fio.ensemble_to_dict(ens, base, boot, var), prov)
    if quality is not None:
        raise quality
    level = cfg.bootstrap["level"]
    rows = [[r["parameter"], r["estimate"], r["se"], r["lb"], r["ub"]]
            for r in summarize(base, ens, level)]
    _write(out, "summary.csv", fio.csv_text(["parameter", "estimate", "se", "lb", "ub"],
                                            rows, prov))
    if ens.replicates:
        bands = residual_bands(data.observations, data.design, base, ens, hyper, level,
                               seed=boot.master_seed)
        rows = [[float(v) for v in r] for r in zip(bands.flux, bands.conf_lo, bands.conf_hi,
                                                    bands.pred_lo, bands.pred_hi)]
        _write(out, "bands.csv", fio.csv_text(
            ["flux", "conf_lo", "conf_hi", "pred_lo", "pred_hi"], rows, prov))
    return EXIT_OK


# --------------------------------------------------------------------------
# cv
# --------------------------------------------------------------------------

def cmd_cv(args) -> int:
    cfg, data, hyper = _load(args)
    if not 1 <= args.pmin <= args.pmax:
        raise fio.InputError("need 1 <= pmin <= pmax")
    res = cross_validate(data.observations, data.design, hyper,
                         range(args.pmin, args.pmax + 1), K=args.folds, seed=args.seed,
                         opt_config=cfg.optimizer_config(), jobs=args.jobs)
    prov = fio.provenance("cv", seed=args.seed, config=cfg, data=args.data)
    out = Path(args.out)
    _write(out, "cv.csv", fio.csv_text(["p", "fold", "mse", "rmse"],
                                       [list(r) for r in res.rows()], prov))
    summary = {"folds": res.folds, "recommended_p": res.recommended_p,
               "degrees": [{"p": p, "mean_mse": m, "root_mean_mse": float(np.sqrt(m))}
                           for p, _, m in res.per_degree]}
    _json(out, "cv.json", summary, prov)
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------

def _eval_points(spec: str, reading_range) -> np.ndarray:
    if spec == "grid" or spec.startswith("grid:"):
        count = 101
        if spec.startswith("grid:"):
            try:
                count = int(spec[5:])
            except ValueError:
                raise fio.InputError(f"bad grid size in {spec!r}") from None
        if count < 1:
            raise fio.InputError("grid size must be positive")
        lo, hi = reading_range
        return np.linspace(lo, hi, count)
    path = Path(spec)
    if not path.exists():
        raise fio.InputError(f"--eval-at: no such file {spec}")
    values = []
    for line in fio._rows(path.read_text()):
        cell = line.split(",")[0].strip()
        if cell == "n":
            continue
        try:
            values.append(float(cell))
        except ValueError:
            raise fio.InputError(f"--eval-at: bad reading {cell!r}") from None
    return np.array(values)


def cmd_calibrate(args) -> int:
    fit, hyper = fio.fit_from_dict(fio.read_json(args.fit))
    ens = fio.ensemble_from_dict(fio.read_json(args.ensemble))
    try:
        ref = CalibrationRef(args.phi_ref, args.n_ref)
    except ValueError as exc:
        raise fio.InputError(str(exc)) from exc
    res = calibrate(fit, ens, ref)
    n = _eval_points(args.eval_at, res.reading_range)
    point, reps = apply_calibration(res, n)
    point = np.atleast_1d(point)
    prov = fio.provenance("calibrate", fit=args.fit, ensemble=args.ensemble)
    prov["phi_ref"] = fio.fmt(args.phi_ref)
    prov["n_ref"] = fio.fmt(args.n_ref)
    out = Path(args.out)
    B = reps.shape[0]
    rows = []
    for i, v in enumerate(n):
        col = reps[:, i] if B else np.full(1, np.nan)
        sd = float(np.std(col, ddof=1)) if B > 1 else float("nan")
        rows.append([float(v), float(point[i]), sd, float(col.min()), float(col.max())])
    _write(out, "calibrated.csv", fio.csv_text(
        ["n", "phi_cal", "replicate_sd", "replicate_min", "replicate_max"], rows, prov))
    header = ["phi_cal"] + [f"rep_{b + 1}" for b in range(B)]
    with np.errstate(divide="ignore", invalid="ignore"):
        abs_dev = reps - point
        rel_dev = reps / point - 1.0
    for name, dev in (("deviation_abs.csv", abs_dev), ("deviation_rel.csv", rel_dev)):
        rows = [[float(point[i])] + [float(x) for x in dev[:, i]] for i in range(n.size)]
        _write(out, name, fio.csv_text(header, rows, prov))
    _json(out, "calibration.json",
          {"phi_ref": ref.phi_ref, "n_ref": ref.n_ref, "rho_hat": res.rho_hat,
           "rho_replicates": res.rho_replicates, "reading_range": list(res.reading_range)},
          prov)
    return EXIT_OK


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

def nonlinearity_curves(fit, ensemble, legacy, grid):
    """Reading minus flux along ``grid`` for the MLE, the legacy fit and
    every bootstrap replicate."""
    mle = expected_reading(grid, fit.params.alpha, fit.phi_max) - grid
    leg = invert_response(grid, legacy.beta) - grid
    reps = [expected_reading(grid, r.params.alpha, r.phi_max) - grid
            for r in ensemble.replicates]
    return mle, leg, reps


def cmd_compare(args) -> int:
    cfg, data, hyper = _load(args)
    opt = cfg.optimizer_config()
    fit = fit_mle(data.observations, data.design, hyper, opt)
    boot = cfg.bootstrap_config(B=args.B, seed=args.seed)
    ens = run_bootstrap(data.observations, data.design, hyper, opt, boot, base_fit=fit,
                        jobs=args.jobs)
    # the legacy scale is anchored to the brightest fitted run so both
    # curves share one flux axis
    top = float(fit.fitted_fluxes.max())
    legacy = legacy_ls_fit(data.observations, data.design, hyper, opt, phi_max=top)
    grid = np.linspace(0.0, top, args.points)
    mle, leg, reps = nonlinearity_curves(fit, ens, legacy, grid)
    prov = fio.provenance("compare", seed=boot.master_seed, config=cfg, data=args.data)
    out = Path(args.out)
    header = ["flux", "mle", "legacy"] + [f"rep_{s + 1}" for s in range(boot.B)
                                          if s not in set(ens.failed_seeds)]
    rows = [[float(grid[i]), float(mle[i]), float(leg[i])] + [float(r[i]) for r in reps]
            for i in range(grid.size)]
    _write(out, "curves.csv", fio.csv_text(header, rows, prov))
    flux, resid = base_residuals(data.observations, data.design, fit)
    points = [[float(f), float(n - f)] for f, n in zip(flux, data.observations.n)]
    _write(out, "readings.csv", fio.csv_text(["flux", "reading_minus_flux"], points, prov))
    rep_arr = np.array(reps) if reps else np.zeros((0, grid.size))
    inside = bool(rep_arr.size and np.all((leg >= rep_arr.min(0)) & (leg <= rep_arr.max(0))))
    _json(out, "compare.json",
          {"legacy_beta": legacy.beta, "legacy_phi": legacy.phi, "legacy_psi": legacy.psi,
           "legacy_objective": legacy.objective, "legacy_converged": legacy.converged,
           "mle_beta": fit.beta, "series": 2 + len(reps), "failures": ens.failures,
           "legacy_within_envelope": inside}, prov)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fluxcal", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"fluxcal {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def jobs(p):
        p.add_argument("--jobs", type=int, default=default_jobs(),
                       help="worker processes (default: $FLUXCAL_JOBS or 1)")

    p = sub.add_parser("simulate", help="draw synthetic datasets")
    p.add_argument("--scenario", required=True, help="1-4 or conjoiner")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--datasets", type=int, default=1)
    p.add_argument("--config")
    jobs(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="maximum-likelihood fit")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["sphere", "conjoiner"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="pairs-bootstrap ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--fit")
    p.add_argument("--B", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["sphere", "conjoiner"])
    jobs(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("cv", help="K-fold cross-validation over polynomial degree")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--pmin", type=int, default=1)
    p.add_argument("--pmax", type=int, default=8)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["sphere", "conjoiner"])
    jobs(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("calibrate", help="single-point calibration")
    p.add_argument("--fit", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--phi-ref", type=float, required=True)
    p.add_argument("--n-ref", type=float, required=True)
    p.add_argument("--eval-at", default="grid", help="grid, grid:N or a file of readings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compare", help="MLE against the legacy least-squares fit")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--B", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--mode", choices=["sphere", "conjoiner"])
    jobs(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except EnsembleQualityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENSEMBLE
    except UnderdeterminedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, OptimizationError, SingularFitError, CalibrationDomainError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (fio.InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
