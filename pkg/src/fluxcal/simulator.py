"""Synthetic flux-addition datasets and the Monte-Carlo evaluation harness.

The sphere simulator follows the seven-lamp, three-aperture layout with a
cubic linearization truth.  A two-beam conjoiner analogue with flux-dependent
noise is also provided for exercising that model variant end to end.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .model import Hyperparams, NoiseModel, Observations, RunDesign

log = logging.getLogger(__name__)

BETA_TRUE = (0.5, 1.0, 0.022, -0.008)
PSI_TRUE = (0.25, 0.5, 0.75)

# id -> (identical lamps, drift half-width %, correlated drift)
SCENARIOS = {
    1: (True, 0.0, None),
    2: (True, 0.5, False),
    3: (True, 0.5, True),
    4: (False, 0.5, True),
}


@dataclass(frozen=True)
class ScenarioSpec:
    id: int = 1
    identical_lamps: bool = True
    drift_pct: float = 0.0
    correlated_drift: bool | None = None
    J: int = 7
    n_v: int = 3
    psi_true: tuple = PSI_TRUE
    beta_true: tuple = BETA_TRUE
    shot_coeff: float = 1.1e-4
    elec_sd: float = 1e-3
    baseline_spread: float = 0.025
    seed: int = 0

    def __post_init__(self):
        psi = np.asarray(self.psi_true, dtype=float)
        if psi.size != self.n_v or np.any(psi <= 0) or np.any(psi >= 1) or \
                np.any(np.diff(psi) <= 0):
            raise ValueError("psi_true must be n_v increasing values in (0, 1)")
        if len(self.beta_true) < 2 or self.beta_true[1] == 0:
            raise ValueError("beta_true needs a nonzero linear coefficient")
        if self.drift_pct < 0 or self.shot_coeff < 0 or self.elec_sd < 0:
            raise ValueError("noise and drift settings must be nonnegative")

    @classmethod
    def table(cls, scenario_id: int, seed: int = 0, **overrides) -> "ScenarioSpec":
        """One of the four standard scenarios."""
        if scenario_id not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario_id!r}; expected 1-4")
        identical, drift, corr = SCENARIOS[scenario_id]
        return cls(id=scenario_id, identical_lamps=identical, drift_pct=drift,
                   correlated_drift=corr, seed=seed, **overrides)

    @property
    def drift_mode(self) -> str:
        if self.drift_pct == 0:
            return "none"
        return "correlated" if self.correlated_drift else "independent"

    def per_lamp_drift_variance(self) -> float:
        """Variance of one lamp's flux under uniform drift around 1/J."""
        half = self.drift_pct / 100.0 / self.J
        return half ** 2 / 3.0


def build_design(J: int = 7, n_v: int = 3, repeats: int = 5) -> RunDesign:
    """Every on/off pattern of the plain lamps times every state of the
    aperture lamp, plus ``repeats`` dark and ``repeats`` all-on runs."""
    plain = list(itertools.product((0, 1), repeat=J - 1))
    x_rows, v_rows = [], []
    states = [(0, ()), (1, ())] + [(0, (k,)) for k in range(n_v)]
    for combo in plain:
        for full, reduced in states:
            x_rows.append(list(combo) + [full])
            v = [0] * n_v
            for k in reduced:
                v[k] = 1
            v_rows.append(v)
    for _ in range(repeats):
        x_rows.append([0] * J)
        v_rows.append([0] * n_v)
    for _ in range(repeats):
        x_rows.append([1] * J)
        v_rows.append([0] * n_v)
    return RunDesign.sphere(np.array(x_rows, dtype=float),
                            np.array(v_rows, dtype=float).reshape(len(x_rows), n_v))


def _poly(beta, x):
    out = np.zeros_like(x) + beta[-1]
    for c in beta[-2::-1]:
        out = out * x + c
    return out


def invert_response(phi_tilde, beta, tol: float = 1e-13, max_iter: int = 200):
    """Solve ``beta_0 + sum beta_m n**m = phi_tilde`` for the reading ``n``.

    Works elementwise on arrays.  A sign-changing bracket is grown around the
    linear guess, then Newton steps are taken, falling back to bisection
    whenever a step leaves the bracket.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.size < 2 or not beta[1:].any():
        raise ValueError("beta must describe a nonconstant polynomial")
    target = np.asarray(phi_tilde, dtype=float)
    scalar = target.ndim == 0
    target = np.atleast_1d(target)
    dbeta = beta[1:] * np.arange(1, beta.size)

    def f(x):
        return _poly(beta, x) - target

    guess = (target - beta[0]) / beta[1] if beta[1] != 0 else np.zeros_like(target)
    width = 0.1 * (1.0 + np.abs(guess))
    lo, hi = guess - width, guess + width
    for _ in range(60):
        bad = f(lo) > 0
        if not bad.any():
            break
        lo = np.where(bad, lo - width, lo)
        width = np.where(bad, 2 * width, width)
    width = 0.1 * (1.0 + np.abs(guess))
    for _ in range(60):
        bad = f(hi) < 0
        if not bad.any():
            break
        hi = np.where(bad, hi + width, hi)
        width = np.where(bad, 2 * width, width)
    if np.any(f(lo) > 0) or np.any(f(hi) < 0):
        raise ValueError("could not bracket a root of an increasing response")
    _check_monotone(dbeta, lo.min(), hi.max())

    x = np.clip(guess, lo, hi)
    for _ in range(max_iter):
        fx = f(x)
        done = np.abs(fx) <= tol * np.maximum(1.0, np.abs(target))
        if done.all():
            break
        lo = np.where(fx < 0, x, lo)
        hi = np.where(fx > 0, x, hi)
        step = fx / _poly(dbeta, x)
        cand = x - step
        outside = ~((cand > lo) & (cand < hi))
        x = np.where(done, x, np.where(outside, 0.5 * (lo + hi), cand))
    return float(x[0]) if scalar else x


def _check_monotone(dbeta, a, b):
    # negligible leading terms only move roots out towards infinity, and
    # subnormal ones overflow the companion matrix
    keep = np.flatnonzero(np.abs(dbeta) > 1e-15 * np.abs(dbeta).max())
    dbeta = dbeta[:keep[-1] + 1]
    roots = np.roots(dbeta[::-1]) if dbeta.size > 1 else np.array([])
    real = roots[np.abs(roots.imag) < 1e-12].real
    if np.any((real > a) & (real < b)):
        raise ValueError("response polynomial is not monotone over the bracket")
    if _poly(dbeta, np.array([0.5 * (a + b)]))[0] <= 0:
        raise ValueError("response polynomial must be increasing")


def simulate_dataset(spec: ScenarioSpec, design: RunDesign | None = None):
    """Draw one dataset for ``spec``.

    Returns ``(observations, design, truth)`` where ``truth`` holds the
    baseline lamp fluxes, aperture fractions, linearization coefficients and
    per-run fluxes actually presented.
    """
    if design is None:
        design = build_design(spec.J, spec.n_v)
    rng = np.random.default_rng(spec.seed)
    J = spec.J
    nominal = 1.0 / J
    if spec.identical_lamps:
        baseline = np.full(J, nominal)
    else:
        raw = rng.uniform(nominal * (1 - spec.baseline_spread),
                          nominal * (1 + spec.baseline_spread), J)
        baseline = raw / raw.sum()
    R = len(design)
    half = spec.drift_pct / 100.0
    if half == 0:
        factors = np.ones((R, J))
    elif spec.correlated_drift:
        factors = np.repeat(1.0 + rng.uniform(-half, half, (R, 1)), J, axis=1)
    else:
        factors = 1.0 + rng.uniform(-half, half, (R, J))
    lamp = baseline * factors
    psi = np.asarray(spec.psi_true, dtype=float)
    flux = np.sum(design.x * lamp, axis=1) + lamp[:, -1] * (design.xv @ psi)
    phi_tilde = flux + spec.shot_coeff * np.sqrt(flux) * rng.standard_normal(R)
    n_tilde = invert_response(phi_tilde, spec.beta_true)
    n = n_tilde + spec.elec_sd * rng.standard_normal(R)
    truth = {
        "scenario": spec.id,
        "seed": spec.seed,
        "phi": baseline.tolist(),
        "psi": psi.tolist(),
        "beta": list(spec.beta_true),
        "run_flux": flux.tolist(),
        "run_lamp_flux": lamp.tolist(),
    }
    return Observations.from_readings(n), design, truth


@dataclass(frozen=True)
class ConjoinerSpec:
    """Two-beam analogue with flux-proportional noise above a knee."""

    J1: int = 8
    J2: int = 8
    ratio1: float = 0.5
    ratio2: float = 0.55
    repeats: int = 4
    beta_true: tuple = (0.0, 1.0, 0.04, -0.02)
    sigma: float = 2e-4
    kappa0: float = 0.2
    # all filter fluxes together; the brightest run then reads close to 1
    phi_max: float = 2.0
    p: int = 5
    seed: int = 0

    def fluxes(self) -> tuple[np.ndarray, np.ndarray]:
        b1 = self.ratio1 ** np.arange(self.J1)
        b2 = 0.9 * self.ratio2 ** np.arange(self.J2)
        scale = self.phi_max / (b1.sum() + b2.sum())
        return b1 * scale, b2 * scale


def conjoiner_design(J1: int, J2: int, repeats: int = 1) -> RunDesign:
    """Each beam either blocked or at one filter setting, all pairings."""
    rows1, rows2 = [], []
    for _ in range(repeats):
        for a in range(J1 + 1):
            for b in range(J2 + 1):
                r1 = np.zeros(J1)
                r2 = np.zeros(J2)
                if a:
                    r1[a - 1] = 1
                if b:
                    r2[b - 1] = 1
                rows1.append(r1)
                rows2.append(r2)
    return RunDesign.conjoiner(np.array(rows1), np.array(rows2))


def simulate_conjoiner(spec: ConjoinerSpec):
    design = conjoiner_design(spec.J1, spec.J2, spec.repeats)
    rng = np.random.default_rng(spec.seed)
    phi1, phi2 = spec.fluxes()
    flux = design.x @ phi1 + design.xv @ phi2
    hyper = Hyperparams.from_prior_mean(spec.phi_max, p=spec.p, kappa0=spec.kappa0,
                                        noise_model=NoiseModel.PIECEWISE)
    knee = spec.kappa0 * spec.phi_max
    sd = spec.sigma * np.where(flux > knee, flux, knee)
    n = invert_response(flux, spec.beta_true) + sd * rng.standard_normal(flux.size)
    truth = {
        "phi1": phi1.tolist(),
        "phi2": phi2.tolist(),
        "beta": list(spec.beta_true),
        "run_flux": flux.tolist(),
        "seed": spec.seed,
    }
    return Observations.from_readings(n), design, truth, hyper


@dataclass
class EvaluationReport:
    """Per-dataset estimates and percentile intervals against the truth.

    Arrays, ``truth`` included, are ``(datasets, parameters)`` with columns
    named by ``names``; the truth varies by dataset when lamp baselines are
    drawn at random.  Datasets whose base fit or ensemble failed are listed in ``failed`` and
    excluded from the arrays.
    """

    scenario: int
    names: list
    truth: np.ndarray
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    seeds: list
    failed: list
    replicate_failures: int = 0

    def relative_bias(self) -> dict:
        err = (self.estimates - self.truth).mean(axis=0)
        return dict(zip(self.names, (err / self.truth.mean(axis=0)).tolist()))

    def coverage(self) -> dict:
        hit = (self.lower <= self.truth) & (self.truth <= self.upper)
        return dict(zip(self.names, hit.mean(axis=0).tolist()))

    def mean_width(self) -> dict:
        return dict(zip(self.names, (self.upper - self.lower).mean(axis=0).tolist()))

    def table(self) -> list[dict]:
        bias, cov, width = self.relative_bias(), self.coverage(), self.mean_width()
        return [{"parameter": n, "truth": float(t), "mean_estimate": float(m),
                 "relative_bias": bias[n], "coverage": cov[n], "mean_width": width[n]}
                for n, t, m in zip(self.names, self.truth.mean(axis=0),
                                   self.estimates.mean(axis=0))]


def dataset_seeds(seed: int, n: int) -> list[tuple[int, int]]:
    """``(data seed, bootstrap seed)`` per dataset, derived from one master seed."""
    out = []
    for d in range(n):
        a, b = np.random.SeedSequence([int(seed), d]).generate_state(2)
        out.append((int(a), int(b)))
    return out


def evaluate_scenario(spec: ScenarioSpec | int, n_datasets: int = 100, B: int = 1000,
                      seed: int = 0, hyper: Hyperparams | None = None, opt_config=None,
                      level: float = 0.95, jobs: int | None = 1,
                      quick: bool = False) -> EvaluationReport:
    """Simulate, fit and bootstrap ``n_datasets`` datasets of one scenario.

    ``quick`` replaces the sizes by 10 datasets of ``B = 100``.  The drift
    assumption of the bootstrap follows the scenario.
    """
    from .bootstrap import (BootstrapConfig, parameter_value, percentile_interval,
                            run_bootstrap)
    from .errors import FluxcalError
    from .estimator import fit_mle

    if isinstance(spec, int):
        spec = ScenarioSpec.table(spec)
    if quick:
        n_datasets, B = 10, 100
    hyper = hyper or Hyperparams()
    design = build_design(spec.J, spec.n_v)
    names = ([f"beta_{m}" for m in range(len(spec.beta_true))]
             + [f"psi_{k + 1}" for k in range(spec.n_v)]
             + [f"phi_{j + 1}" for j in range(spec.J)])
    est, lo, hi, truth, used, failed = [], [], [], [], [], []
    rep_fail = 0
    for d, (data_seed, boot_seed) in enumerate(dataset_seeds(seed, n_datasets)):
        spec_d = ScenarioSpec(**{**spec.__dict__, "seed": data_seed})
        obs, _, tr = simulate_dataset(spec_d, design)
        boot = BootstrapConfig(B=B, master_seed=boot_seed, drift_mode=spec.drift_mode,
                               per_lamp_drift_variance=spec.per_lamp_drift_variance())
        try:
            fit = fit_mle(obs, design, hyper, opt_config)
            ens = run_bootstrap(obs, design, hyper, opt_config, boot, base_fit=fit, jobs=jobs)
        except FluxcalError as exc:
            log.warning("dataset %d failed: %s", d, exc)
            failed.append(d)
            continue
        rep_fail += ens.failures
        row, l, h = [], [], []
        for name in names:
            row.append(parameter_value(fit, name))
            a, b = percentile_interval(ens.values(name), level)
            l.append(a)
            h.append(b)
        est.append(row)
        lo.append(l)
        hi.append(h)
        truth.append(tr["beta"] + tr["psi"] + tr["phi"])
        used.append(data_seed)
    return EvaluationReport(scenario=spec.id, names=names, truth=np.array(truth),
                            estimates=np.array(est), lower=np.array(lo), upper=np.array(hi),
                            seeds=used, failed=failed, replicate_failures=rep_fail)
