"""Configuration, data files and deterministic result serialization."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, BootstrapEnsemble, parameter_names, parameter_value
from .estimator import OptimizerConfig
from .model import (FitResult, Hyperparams, Mode, ModelParams, NoiseModel, Observations,
                    RunDesign)


class InputError(ValueError):
    """Malformed configuration or data file."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["sphere", "conjoiner"]},
                "phi_max": _POS,
                "tau": _POS,
                "gamma_prior_mean": _POS,
                "p": _INT1,
                "kappa0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "noise_model": {"enum": ["constant", "piecewise"]},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iterations": _INT1,
                "gradient_tolerance": _POS,
                "restarts": _INT1,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "B": _INT1,
                "seed": {"type": "integer", "minimum": 0},
                "drift_mode": {"enum": ["none", "independent", "correlated", "explicit"]},
                "per_lamp_drift_variance": _NONNEG,
                "explicit_variance": _NONNEG,
                "max_failure_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "J": {"type": "integer", "minimum": 2},
                "n_v": {"type": "integer", "minimum": 1},
                "psi_true": {"type": "array", "items": _NUM},
                "beta_true": {"type": "array", "items": _NUM, "minItems": 2},
                "shot_coeff": _NONNEG,
                "elec_sd": _NONNEG,
                "baseline_spread": _NONNEG,
            },
        },
    },
}


@dataclass
class Config:
    """Validated configuration with every default filled in."""

    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    bootstrap: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"model": self.model, "optimizer": self.optimizer,
                "bootstrap": self.bootstrap, "scenario": self.scenario}

    @property
    def digest(self) -> str:
        return hashlib.sha256(dumps(self.as_dict()).encode()).hexdigest()

    def hyperparams(self, mode: Mode) -> Hyperparams:
        m = self.model
        if mode is Mode.CONJOINER and "kappa0" not in m:
            raise InputError("conjoiner mode requires model.kappa0 in the configuration")
        noise = m.get("noise_model") or ("piecewise" if mode is Mode.CONJOINER else "constant")
        return Hyperparams.from_prior_mean(
            m["phi_max"], m.get("gamma_prior_mean"), tau=m.get("tau"), p=m["p"],
            kappa0=m.get("kappa0", 1.0), noise_model=NoiseModel(noise))

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer)

    def bootstrap_config(self, B: int | None = None, seed: int | None = None) -> BootstrapConfig:
        b = self.bootstrap
        return BootstrapConfig(
            B=B if B is not None else b["B"],
            master_seed=seed if seed is not None else b["seed"],
            drift_mode=b["drift_mode"],
            per_lamp_drift_variance=b.get("per_lamp_drift_variance"),
            explicit_variance=b.get("explicit_variance"),
            max_failure_fraction=b["max_failure_fraction"])


_DEFAULTS = {
    "model": {"phi_max": 1.0, "p": 3},
    "optimizer": {"max_iterations": 500, "gradient_tolerance": 1e-6, "restarts": 1, "seed": 0},
    "bootstrap": {"B": 1000, "seed": 0, "drift_mode": "none", "max_failure_fraction": 0.10,
                  "level": 0.95},
    "scenario": {},
}


def load_config(path=None) -> Config:
    """Read and validate a JSON configuration; ``None`` gives the defaults."""
    raw = {}
    if path is not None:
        raw = read_json(path)
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"configuration error at {where}: {exc.message}") from exc
    merged = {k: {**v, **raw.get(k, {})} for k, v in _DEFAULTS.items()}
    return Config(**merged)


# --------------------------------------------------------------------------
# data files
# --------------------------------------------------------------------------

_COL = re.compile(r"^(x|xv|a|b)(\d+)$")


def _indicator_columns(header, prefix):
    nums = sorted(int(m.group(2)) for h in header
                  if (m := _COL.match(h)) and m.group(1) == prefix)
    if not nums:
        return []
    for k in range(1, nums[-1] + 1):
        if k not in nums:
            raise InputError(f"missing indicator column {prefix}{k}")
    return [f"{prefix}{k}" for k in range(1, nums[-1] + 1)]


@dataclass
class Dataset:
    observations: Observations
    design: RunDesign
    run_ids: np.ndarray  # run_id of each design row

    @property
    def mode(self) -> Mode:
        return self.design.mode


def _rows(text):
    return [line for line in text.splitlines() if line and not line.startswith("#")]


def read_data(path, mode: str | Mode | None = None) -> Dataset:
    """Parse a data CSV.  Rows sharing a ``run_id`` are repeat readings of
    one design run and must carry identical indicators."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    reader = csv.reader(_rows(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InputError(f"{path}: empty data file") from None
    for col in ("run_id", "n"):
        if col not in header:
            raise InputError(f"missing column {col}")
    has_ab = any(_COL.match(h) and _COL.match(h).group(1) in "ab" for h in header)
    has_x = any(_COL.match(h) and _COL.match(h).group(1) in ("x", "xv") for h in header)
    if mode is None:
        mode = Mode.CONJOINER if has_ab and not has_x else Mode.SPHERE
    mode = Mode(mode)
    if mode is Mode.SPHERE:
        first, second = _indicator_columns(header, "x"), _indicator_columns(header, "xv")
        if not first:
            raise InputError("missing indicator column x1")
    else:
        first, second = _indicator_columns(header, "a"), _indicator_columns(header, "b")
        if not first:
            raise InputError("missing indicator column a1")
        if not second:
            raise InputError("missing indicator column b1")
    pos = {h: i for i, h in enumerate(header)}
    run_ids, n, ind = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise InputError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            run_ids.append(int(row[pos["run_id"]]))
            n.append(float(row[pos["n"]]))
            ind.append([float(row[pos[c]]) for c in first + second])
        except ValueError as exc:
            raise InputError(f"line {lineno}: {exc}") from exc
    if not n:
        raise InputError(f"{path}: no observations")
    ind = np.array(ind)
    if not np.all((ind == 0) | (ind == 1)):
        raise InputError("indicator cells must be 0 or 1")
    uniq, first_row, run_index = np.unique(run_ids, return_index=True, return_inverse=True)
    rows = ind[first_row]
    if not np.array_equal(rows[run_index], ind):
        raise InputError("rows sharing a run_id have different indicators")
    J1 = len(first)
    try:
        if mode is Mode.SPHERE:
            design = RunDesign.sphere(rows[:, :J1], rows[:, J1:])
        else:
            design = RunDesign.conjoiner(rows[:, :J1], rows[:, J1:])
        obs = Observations(run_index, np.array(n))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return Dataset(obs, design, uniq)


def data_csv(observations: Observations, design: RunDesign, run_ids=None,
             provenance: dict | None = None) -> str:
    """Serialize a dataset in the format :func:`read_data` accepts."""
    if design.mode is Mode.SPHERE:
        names = [f"x{j + 1}" for j in range(design.x.shape[1])]
        names += [f"xv{k + 1}" for k in range(design.xv.shape[1])]
    else:
        names = [f"a{j + 1}" for j in range(design.x.shape[1])]
        names += [f"b{j + 1}" for j in range(design.xv.shape[1])]
    ind = np.hstack([design.x, design.xv]).astype(int)
    ids = np.arange(len(design)) if run_ids is None else np.asarray(run_ids)
    rows = [[int(ids[r]), fmt(v)] + ind[r].tolist()
            for r, v in zip(observations.run_index, observations.n)]
    return csv_text(["run_id", "n"] + names, rows, provenance)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def fmt(v) -> str:
    """Seventeen significant digits; enough to round-trip any double."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, two-space indent, 17-digit floats,
    non-finite floats as null."""
    out = io.StringIO()
    _emit(obj, out, 0)
    out.write("\n")
    return out.getvalue()


def _emit(obj, out, depth):
    pad = "  " * (depth + 1)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{\n")
        for i, key in enumerate(sorted(obj)):
            out.write(f"{pad}{json.dumps(str(key))}: ")
            _emit(obj[key], out, depth + 1)
            out.write(",\n" if i < len(obj) - 1 else "\n")
        out.write("  " * depth + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.write("[]")
        elif all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            out.write("[" + ", ".join(_scalar(v) for v in obj) + "]")
        else:
            out.write("[\n")
            for i, v in enumerate(obj):
                out.write(pad)
                _emit(v, out, depth + 1)
                out.write(",\n" if i < len(obj) - 1 else "\n")
            out.write("  " * depth + "]")
    else:
        out.write(_scalar(obj))


def _scalar(v) -> str:
    if v is None or isinstance(v, (bool, np.bool_)):
        return json.dumps(None if v is None else bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v) if math.isfinite(v) else "null"
    if isinstance(v, enum.Enum):
        return json.dumps(v.value)
    return json.dumps(str(v))


def csv_text(header, rows, provenance: dict | None = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(command: str, seed=None, config: Config | None = None, **inputs) -> dict:
    """Header fields identifying how a result was produced (no timestamps)."""
    out = {"tool": "fluxcal", "version": __version__, "command": command}
    if seed is not None:
        out["seed"] = int(seed)
    if config is not None:
        out["config_sha256"] = config.digest
    for name, path in inputs.items():
        if path is not None:
            out[f"{name}_sha256"] = file_digest(path)
    return out


def hyper_to_dict(h: Hyperparams) -> dict:
    return {"phi_max": h.phi_max, "tau": h.tau, "lambda_rate": h.lambda_rate, "p": h.p,
            "kappa0": h.kappa0, "noise_model": h.noise_model.value}


def hyper_from_dict(d: dict) -> Hyperparams:
    return Hyperparams(**d)


def fit_to_dict(fit: FitResult, dataset: Dataset, hyper: Hyperparams) -> dict:
    """Everything a later stage needs, plus per-observation residuals."""
    from .model import expected_reading

    p = fit.params
    obs = dataset.observations
    flux = fit.fitted_fluxes[obs.run_index]
    resid = obs.n - expected_reading(flux, p.alpha, fit.phi_max)
    out = {
        "mode": dataset.mode.value,
        "hyperparams": hyper_to_dict(hyper),
        "alpha": p.alpha, "beta": fit.beta, "phi": p.phi, "psi": p.psi,
        "gamma": p.gamma, "sigma": p.sigma,
        "loglik": fit.loglik, "converged": bool(fit.converged),
        "iterations": int(fit.iterations), "grad_norm": fit.grad_norm,
        "run_ids": dataset.run_ids, "fitted_fluxes": fit.fitted_fluxes,
        "observations": {"run_id": dataset.run_ids[obs.run_index], "n": obs.n,
                         "flux": flux, "residual": resid},
        "hessian": fit.hessian if fit.hessian is not None else None,
    }
    if p.beam_sizes is not None:
        out["beam_sizes"] = list(p.beam_sizes)
        out["phi1"] = p.phi1
        out["phi2"] = p.phi2
    return out


def fit_from_dict(d: dict) -> tuple[FitResult, Hyperparams]:
    try:
        hyper = hyper_from_dict(d["hyperparams"])
        params = ModelParams(phi=d["phi"], alpha=d["alpha"], gamma=d["gamma"],
                             sigma=d["sigma"], psi=d["psi"],
                             beam_sizes=tuple(d["beam_sizes"]) if "beam_sizes" in d else None)
        hess = np.array(d["hessian"], dtype=float) if d.get("hessian") is not None else None
        fit = FitResult(params=params, beta=np.array(d["beta"], dtype=float),
                        fitted_fluxes=np.array(d["fitted_fluxes"], dtype=float),
                        loglik=d["loglik"], converged=d["converged"],
                        iterations=d["iterations"], phi_max=hyper.phi_max,
                        grad_norm=d["grad_norm"] if d["grad_norm"] is not None else math.nan,
                        hessian=hess)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed fit file: {exc}") from exc
    return fit, hyper


def ensemble_to_dict(ens: BootstrapEnsemble, base: FitResult, config: BootstrapConfig,
                     drift_variance: float) -> dict:
    names = parameter_names(base)
    return {
        "B": config.B, "master_seed": config.master_seed,
        "drift_mode": config.drift_mode.value, "drift_variance": drift_variance,
        "failures": ens.failures, "failed_seeds": ens.failed_seeds,
        "names": names,
        "replicate_seeds": [s for s in ens.seeds if s not in set(ens.failed_seeds)],
        "phi_max": [r.phi_max for r in ens.replicates],
        "replicates": [[parameter_value(r, n) for n in names] for r in ens.replicates],
    }


def ensemble_from_dict(d: dict) -> BootstrapEnsemble:
    """Rebuild replicate fits (parameters only) from an ensemble file."""
    try:
        names = d["names"]
        reps = []
        for values, pm in zip(d["replicates"], d["phi_max"]):
            v = dict(zip(names, values))
            alpha = [v[n] for n in names if n.startswith("alpha_")]
            beta = [v[n] for n in names if n.startswith("beta_")]
            phi = [v[n] for n in names if re.match(r"^phi[12]?_", n)]
            psi = [v[n] for n in names if n.startswith("psi_")]
            n1 = sum(1 for n in names if n.startswith("phi1_"))
            bs = (n1, len(phi) - n1) if n1 else None
            params = ModelParams(phi=phi, alpha=alpha, gamma=v["gamma"], sigma=v["sigma"],
                                 psi=psi, beam_sizes=bs)
            reps.append(FitResult(params=params, beta=np.array(beta), fitted_fluxes=np.zeros(0),
                                  loglik=math.nan, converged=True, iterations=0, phi_max=pm))
        return BootstrapEnsemble(replicates=reps, failures=d["failures"],
                                 seeds=list(range(d["B"])), failed_seeds=d["failed_seeds"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed ensemble file: {exc}") from exc


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
