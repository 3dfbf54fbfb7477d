"""Pairs bootstrap with optional drift perturbation of the flux scale.

Each replicate resamples ``(reading, design row)`` pairs with replacement,
optionally perturbs ``phi_max`` by Gaussian noise whose variance represents
lamp drift, and refits.  Replicate ``b`` draws all of its randomness from
``SeedSequence([master_seed, b])`` so ensembles do not depend on execution
order or worker count.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EnsembleQualityError, FluxcalError
from .estimator import OptimizerConfig, fit_mle
from .model import (FitResult, Hyperparams, Observations, RunDesign, compose_flux,
                    expected_reading, noise_sd)
from .parallel import map_ordered

log = logging.getLogger(__name__)


class DriftMode(str, enum.Enum):
    NONE = "none"
    INDEPENDENT = "independent"
    CORRELATED = "correlated"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    master_seed: int = 0
    drift_mode: DriftMode = DriftMode.NONE
    per_lamp_drift_variance: float | None = None
    explicit_variance: float | None = None
    max_failure_fraction: float = 0.10

    def __post_init__(self):
        mode = DriftMode(self.drift_mode)
        object.__setattr__(self, "drift_mode", mode)
        if self.B < 1:
            raise ValueError("B must be at least 1")
        # no drift magnitude is defensible by default; demand it whenever drift is on
        if mode in (DriftMode.INDEPENDENT, DriftMode.CORRELATED) and \
                self.per_lamp_drift_variance is None:
            raise ValueError(f"drift mode {mode.value!r} needs per_lamp_drift_variance")
        if mode is DriftMode.EXPLICIT and self.explicit_variance is None:
            raise ValueError("drift mode 'explicit' needs explicit_variance")
        for v in (self.per_lamp_drift_variance, self.explicit_variance):
            if v is not None and not v >= 0:
                raise ValueError("drift variances must be nonnegative")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ValueError("max_failure_fraction must lie in [0, 1]")


@dataclass
class BootstrapEnsemble:
    replicates: list[FitResult]
    failures: int
    seeds: list[int]
    failed_seeds: list[int] = field(default_factory=list)

    @property
    def B(self) -> int:
        return len(self.replicates) + self.failures

    def values(self, name: str) -> np.ndarray:
        """Replicate values of a named parameter, e.g. ``"beta_1"``."""
        return np.array([parameter_value(r, name) for r in self.replicates])


def parameter_names(fit: FitResult) -> list[str]:
    p = fit.params
    names = [f"beta_{m}" for m in range(p.alpha.size)]
    names += [f"alpha_{m}" for m in range(p.alpha.size)]
    if p.beam_sizes is None:
        names += [f"phi_{j + 1}" for j in range(p.phi.size)]
    else:
        names += [f"phi1_{j + 1}" for j in range(p.beam_sizes[0])]
        names += [f"phi2_{j + 1}" for j in range(p.beam_sizes[1])]
    names += [f"psi_{k + 1}" for k in range(p.psi.size)]
    return names + ["gamma", "sigma"]


def parameter_value(fit: FitResult, name: str) -> float:
    p = fit.params
    if name in ("gamma", "sigma"):
        return float(getattr(p, name))
    head, _, idx = name.rpartition("_")
    i = int(idx)
    if head == "beta":
        return float(fit.beta[i])
    if head == "alpha":
        return float(p.alpha[i])
    if head == "psi":
        return float(p.psi[i - 1])
    if head == "phi":
        return float(p.phi[i - 1])
    if head == "phi1":
        return float(p.phi1[i - 1])
    if head == "phi2":
        return float(p.phi2[i - 1])
    raise KeyError(name)


def drift_sigma2(config: BootstrapConfig, J: int) -> float:
    """Variance of the total flux implied by the drift assumption."""
    if J < 1:
        raise ValueError("J must be at least 1")
    mode = config.drift_mode
    if mode is DriftMode.NONE:
        return 0.0
    if mode is DriftMode.EXPLICIT:
        return float(config.explicit_variance)
    if mode is DriftMode.INDEPENDENT:
        return J * config.per_lamp_drift_variance
    if mode is DriftMode.CORRELATED:
        return J * J * config.per_lamp_drift_variance
    raise ValueError(f"unknown drift mode {mode!r}")


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def resample_pairs(observations: Observations, design: RunDesign, seed):
    """Draw ``N`` (reading, design row) pairs uniformly with replacement.

    The returned design holds the drawn rows in draw order and the returned
    observations index them one to one.
    """
    N = len(observations)
    if N < 1:
        raise ValueError("need at least one observation")
    idx = _rng(seed).integers(0, N, N)
    rows = observations.run_index[idx]
    return Observations(np.arange(N), observations.n[idx]), design.take(rows)


def replicate_seed(master_seed: int, b: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(b)])


def run_bootstrap(observations: Observations, design: RunDesign, hyper: Hyperparams,
                  opt_config: OptimizerConfig | None, boot_config: BootstrapConfig,
                  base_fit: FitResult | None = None, jobs: int | None = 1,
                  check_quality: bool = True) -> BootstrapEnsemble:
    """Fit ``B`` bootstrap replicates warm-started at the base MLE.

    A replicate whose optimizer raises or fails to converge (after one
    retry from the default start) is dropped and counted.
    """
    opt_config = opt_config or OptimizerConfig()
    if base_fit is None:
        base_fit = fit_mle(observations, design, hyper, opt_config)
    var = drift_sigma2(boot_config, design.n_fluxes)
    tasks = [(observations, design, hyper, opt_config, base_fit, boot_config.master_seed, b, var)
             for b in range(boot_config.B)]
    results = map_ordered(_replicate, tasks, jobs)
    replicates, failed = [], []
    for b, res in enumerate(results):
        if res is None:
            failed.append(b)
        else:
            replicates.append(res)
    ens = BootstrapEnsemble(replicates=replicates, failures=len(failed),
                            seeds=list(range(boot_config.B)), failed_seeds=failed)
    if failed:
        log.info("%d of %d bootstrap replicates failed", len(failed), boot_config.B)
    if check_quality and len(failed) > boot_config.max_failure_fraction * boot_config.B:
        err = EnsembleQualityError(
            f"{len(failed)} of {boot_config.B} replicates failed "
            f"(limit {boot_config.max_failure_fraction:.0%})")
        err.ensemble = ens
        raise err
    return ens


def _replicate(args):
    observations, design, hyper, opt_config, base_fit, master_seed, b, var = args
    rng = np.random.default_rng(replicate_seed(master_seed, b))
    obs_b, design_b = resample_pairs(observations, design, rng)
    hyper_b = hyper
    try:
        if var > 0:
            # a draw that leaves no positive full scale fails like a bad fit
            hyper_b = hyper.with_phi_max(hyper.phi_max + np.sqrt(var) * rng.standard_normal())
        fit = fit_mle(obs_b, design_b, hyper_b, opt_config,
                      start=base_fit.params, hessian=base_fit.hessian)
        if fit.converged:
            return _strip(fit)
        fit = fit_mle(obs_b, design_b, hyper_b, opt_config)
        return _strip(fit) if fit.converged else None
    except (FluxcalError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("replicate %d failed: %s", b, exc)
        return None


def _strip(fit: FitResult) -> FitResult:
    # replicate fluxes refer to the resampled design; drop them with the Hessian
    return FitResult(params=fit.params, beta=fit.beta, fitted_fluxes=np.zeros(0),
                     loglik=fit.loglik, converged=fit.converged,
                     iterations=fit.iterations, phi_max=fit.phi_max,
                     grad_norm=fit.grad_norm)


def standard_error(values) -> float:
    """Sample standard deviation with divisor ``B - 1``."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values")
    return float(np.sqrt(np.sum((v - v.mean()) ** 2) / (v.size - 1)))


def percentile_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval.

    Quantile ``q`` sits at 1-based position ``q * (B - 1) + 1`` of the
    sorted values, interpolating linearly between neighbours.
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size < 20:
        raise ValueError("need at least 20 values for a percentile interval")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return _quantile(v, 0.5 * (1 - level)), _quantile(v, 0.5 * (1 + level))


def _quantile(sorted_v, q):
    pos = q * (sorted_v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, sorted_v.size - 1)
    frac = pos - lo
    return float(sorted_v[lo] + frac * (sorted_v[hi] - sorted_v[lo]))


def summarize(base_fit: FitResult, ensemble: BootstrapEnsemble, level: float = 0.95):
    """Estimate, bootstrap SE and percentile interval for every parameter."""
    rows = []
    for name in parameter_names(base_fit):
        vals = ensemble.values(name)
        se = standard_error(vals) if vals.size >= 2 else float("nan")
        lb, ub = percentile_interval(vals, level) if vals.size >= 20 else (float("nan"),) * 2
        rows.append({"parameter": name, "estimate": parameter_value(base_fit, name),
                     "se": se, "lb": lb, "ub": ub})
    return rows


@dataclass
class ResidualBands:
    flux: np.ndarray
    conf_lo: np.ndarray
    conf_hi: np.ndarray
    pred_lo: np.ndarray
    pred_hi: np.ndarray

    def contains(self, residuals) -> np.ndarray:
        r = np.asarray(residuals)
        return (r >= self.pred_lo) & (r <= self.pred_hi)


def residual_bands(observations: Observations, design: RunDesign, base_fit: FitResult,
                   ensemble: BootstrapEnsemble, hyper: Hyperparams, level: float = 0.95,
                   flux=None, seed: int = 0) -> ResidualBands:
    """Pointwise confidence and prediction bands for reading residuals.

    Bands are relative to the base mean-response curve.  The prediction
    band adds one Gaussian noise draw per replicate and flux point using the
    replicate's own noise scale, inflated by ``sqrt(N / (N - k))`` for the
    ``k`` fitted parameters (maximum-likelihood noise estimates are biased
    low by about that factor).  ``flux`` defaults to a 201-point grid over
    the fitted flux range.
    """
    if not ensemble.replicates:
        raise ValueError("ensemble is empty")
    if flux is None:
        fitted = base_fit.fitted_fluxes
        flux = np.linspace(fitted.min(), fitted.max(), 201)
    flux = np.asarray(flux, dtype=float)
    base = expected_reading(flux, base_fit.params.alpha, base_fit.phi_max)
    p = base_fit.params
    N = len(observations)
    k = p.phi.size + p.psi.size + p.alpha.size + 2
    inflate = np.sqrt(N / (N - k)) if N > k else 1.0
    rng = np.random.default_rng(seed)
    B = len(ensemble.replicates)
    mean_dev = np.empty((B, flux.size))
    pred_dev = np.empty((B, flux.size))
    for b, rep in enumerate(ensemble.replicates):
        hb = hyper.with_phi_max(rep.phi_max)
        mu = expected_reading(flux, rep.params.alpha, rep.phi_max)
        mean_dev[b] = mu - base
        sd = inflate * noise_sd(flux, rep.params, hb)
        pred_dev[b] = mean_dev[b] + sd * rng.standard_normal(flux.size)
    lo_q, hi_q = 0.5 * (1 - level), 0.5 * (1 + level)
    cl, ch = np.quantile(mean_dev, [lo_q, hi_q], axis=0)
    pl, ph = np.quantile(pred_dev, [lo_q, hi_q], axis=0)
    return ResidualBands(flux, cl, ch, pl, ph)


def base_residuals(observations: Observations, design: RunDesign, fit: FitResult):
    """``(fitted flux, residual)`` per observation under the base fit."""
    flux = compose_flux(design, fit.params)[observations.run_index]
    return flux, observations.n - expected_reading(flux, fit.params.alpha, fit.phi_max)
