"""Maximum-likelihood fitting, linearization coefficients and degree selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from . import _backend
from .errors import OptimizationError, SingularFitError, UnderdeterminedError
from .model import (FitResult, Hyperparams, ModelParams, NoiseModel, Observations,
                    RunDesign, compose_flux, expected_reading, scale_from_unit)
from .optimize import maximize

log = logging.getLogger(__name__)

DEFAULT_GRID = 1001


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


class Objective:
    """Penalized log-likelihood over the unconstrained parameter vector.

    Layout: ``log phi`` (J), ``logit psi`` (N_v), ``alpha`` (p + 1),
    ``log gamma``, ``log sigma``.
    """

    def __init__(self, observations: Observations, design: RunDesign, hyper: Hyperparams):
        observations.validate(design)
        X, V = design.flux_matrix()
        idx = observations.run_index
        self.X = np.ascontiguousarray(X[idx])
        self.V = np.ascontiguousarray(V[idx])
        self.n = np.ascontiguousarray(observations.n)
        self.hyper = hyper
        self.design = design
        self.J = X.shape[1]
        self.Nv = V.shape[1]
        self.p = hyper.p
        self.size = self.J + self.Nv + self.p + 3
        self.piecewise = hyper.noise_model is NoiseModel.PIECEWISE

    def unpack(self, theta) -> ModelParams:
        J, Nv, p = self.J, self.Nv, self.p
        return ModelParams(
            phi=np.exp(theta[:J]),
            psi=1.0 / (1.0 + np.exp(-theta[J:J + Nv])),
            alpha=theta[J + Nv:J + Nv + p + 1],
            gamma=float(np.exp(theta[-2])),
            sigma=float(np.exp(theta[-1])),
            beam_sizes=self.design.beam_sizes,
        )

    def pack(self, params: ModelParams) -> np.ndarray:
        psi = np.clip(params.psi, 1e-12, 1 - 1e-12)
        return np.concatenate([
            np.log(np.maximum(params.phi, 1e-300)),
            np.log(psi / (1 - psi)),
            params.alpha,
            [np.log(params.gamma), np.log(params.sigma)],
        ])

    def value_grad(self, theta):
        J, Nv, p = self.J, self.Nv, self.p
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            phi = np.exp(theta[:J])
            psi = 1.0 / (1.0 + np.exp(-theta[J:J + Nv]))
            alpha = np.ascontiguousarray(theta[J + Nv:J + Nv + p + 1])
            gamma = np.exp(theta[-2])
            sigma = np.exp(theta[-1])
            h = self.hyper
            v, dphi, dpsi, dalpha, dsig, dgam = _backend.loglik_grad(
                self.n, self.X, self.V, phi, psi, alpha, sigma, gamma,
                h.phi_max, h.tau, h.lambda_rate, self.piecewise, h.kappa0)
            grad = np.concatenate([dphi * phi, dpsi * psi * (1 - psi), dalpha,
                                   [dgam * gamma, dsig * sigma]])
        return float(v), grad

    def initial(self) -> ModelParams:
        """Start at the penalty's preferred point."""
        h = self.hyper
        bs = self.design.beam_sizes
        if bs is None:
            phi = np.full(self.J, h.phi_max / self.J)
        else:
            phi = np.concatenate([np.full(bs[0], h.phi_max / (2 * bs[0])),
                                  np.full(bs[1], h.phi_max / (2 * bs[1]))])
        psi = np.arange(1, self.Nv + 1) / (self.Nv + 1)
        alpha = np.zeros(self.p + 1)
        alpha[0] = self.n.mean()
        alpha[1] = 0.5 * h.phi_max
        flux = self.X @ phi
        if self.Nv:
            flux = flux + phi[-1] * (self.V @ psi)
        resid = self.n - (alpha[0] + alpha[1] * (2 * flux / h.phi_max - 1))
        sigma = float(np.std(resid)) or 1e-3 * h.phi_max
        if self.piecewise:
            knee = h.kappa0 * h.phi_max
            sigma = float(np.std(resid / np.where(flux > knee, flux, knee))) or 1e-3
        return ModelParams(phi=phi, psi=psi, alpha=alpha, gamma=0.1 * h.phi_max,
                           sigma=sigma, beam_sizes=bs)


def _jitter(theta, obj: Objective, rng) -> np.ndarray:
    out = theta.copy()
    out[:obj.J] += rng.normal(0.0, 0.05, obj.J)
    return out


def _settle(obj: Objective, theta0, cfg: OptimizerConfig) -> np.ndarray:
    """Maximize with ``gamma`` held at its starting value.

    With the Legendre coefficients sitting exactly at their prior means the
    likelihood grows without bound as ``gamma`` shrinks, so a search started
    there can slide away from the interior mode.  Letting the coefficients
    absorb the data's curvature first avoids that.
    """
    k = obj.size - 2
    log_gamma = theta0[k]

    def vg(z):
        v, g = obj.value_grad(np.insert(z, k, log_gamma))
        return v, np.delete(g, k)

    try:
        out = maximize(vg, np.delete(theta0, k), gtol=cfg.gradient_tolerance,
                       max_iter=cfg.max_iterations, newton_rounds=2)
    except (FloatingPointError, np.linalg.LinAlgError):
        return theta0
    return np.insert(out.x, k, log_gamma)


def fit_mle(observations: Observations, design: RunDesign, hyper: Hyperparams,
            opt_config: OptimizerConfig | None = None, *, start: ModelParams | None = None,
            hessian=None, grid_size: int = DEFAULT_GRID) -> FitResult:
    """Maximum penalized-likelihood estimates for one dataset.

    Parameters
    ----------
    start
        Warm start, refined locally.  Otherwise the deterministic
        initialization is used, first with ``gamma`` held fixed.
    hessian
        Objective Hessian (unconstrained coordinates) reused as the search
        preconditioner, typically from a previous fit of similar data.

    Returns
    -------
    FitResult
        Best point over all starts.  ``converged`` is false when the gradient
        tolerance was not met; the point is still returned.
    """
    cfg = opt_config or OptimizerConfig()
    obj = Objective(observations, design, hyper)
    if len(observations) < obj.size:
        raise UnderdeterminedError(
            f"{len(observations)} observations for {obj.size} free parameters")
    rng = np.random.default_rng(cfg.seed)
    if start is None:
        theta0 = _settle(obj, obj.pack(obj.initial()), cfg)
    else:
        theta0 = obj.pack(start)
    best = None
    for attempt in range(cfg.restarts):
        x0 = theta0 if attempt == 0 else _jitter(theta0, obj, rng)
        try:
            out = maximize(obj.value_grad, x0, gtol=cfg.gradient_tolerance,
                           max_iter=cfg.max_iterations,
                           hessian=hessian if attempt == 0 else None,
                           local=start is not None and attempt == 0)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.debug("start %d failed: %s", attempt, exc)
            continue
        if best is None or out.value > best.value:
            best = out
    if best is None or not np.isfinite(best.value):
        raise OptimizationError("objective was not finite from any start")
    return _result(obj, best, grid_size)


def _result(obj: Objective, out, grid_size: int) -> FitResult:
    params = obj.unpack(out.x)
    beta = derive_beta(params.alpha, obj.hyper, grid_size)
    return FitResult(params=params, beta=beta,
                     fitted_fluxes=compose_flux(obj.design, params),
                     loglik=out.value, converged=out.converged,
                     iterations=out.iterations, phi_max=obj.hyper.phi_max,
                     grad_norm=out.grad_norm, hessian=out.hessian)


def derive_beta(alpha, hyper: Hyperparams, grid_size: int = DEFAULT_GRID) -> np.ndarray:
    """Monomial coefficients of flux as a function of expected reading.

    The fitted forward curve is sampled on a regular grid spanning
    ``[0, phi_max]`` and inverted by ordinary least squares.  Readings are
    centred and scaled internally; coefficients are converted back.
    """
    alpha = np.asarray(alpha, dtype=float)
    p = alpha.size - 1
    if grid_size < 10 * (p + 1):
        raise ValueError("grid_size must be at least 10 * (p + 1)")
    flux = scale_from_unit(np.linspace(-1.0, 1.0, grid_size), hyper.phi_max)
    reading = expected_reading(flux, alpha, hyper.phi_max)
    lo, hi = reading.min(), reading.max()
    half = 0.5 * (hi - lo)
    if not half > 0:
        raise SingularFitError("expected reading is constant over the flux range")
    mid = 0.5 * (hi + lo)
    A = np.vander((reading - mid) / half, p + 1, increasing=True)
    coef, _, rank, sv = np.linalg.lstsq(A, flux, rcond=None)
    if rank < p + 1 or sv[-1] < 1e-12 * sv[0]:
        raise SingularFitError("monomial design is rank deficient")
    mono = Polynomial(coef)(Polynomial([-mid / half, 1.0 / half])).coef
    out = np.zeros(p + 1)
    out[:mono.size] = mono
    return out


def predict_readings(design: RunDesign, params: ModelParams, hyper: Hyperparams, rows=None):
    return expected_reading(compose_flux(design, params, rows), params.alpha, hyper.phi_max)


@dataclass
class CvResult:
    """Cross-validated prediction error by polynomial degree."""

    per_degree: list = field(default_factory=list)  # (p, fold_mses, mean_mse)
    recommended_p: int | None = None
    folds: int = 0

    def rows(self):
        for p, fold_mses, _ in self.per_degree:
            for k, mse in enumerate(fold_mses):
                yield p, k, float(mse), float(np.sqrt(mse))


def fold_assignment(observations: Observations, K: int, seed: int) -> list[np.ndarray]:
    """Split observation indices into ``K`` folds by design run."""
    runs = np.unique(observations.run_index)
    if K < 2:
        raise ValueError("need at least two folds")
    if K > runs.size:
        raise ValueError(f"{K} folds but only {runs.size} distinct runs")
    order = np.random.default_rng(seed).permutation(runs)
    fold_of_run = dict(zip(order.tolist(), (np.arange(runs.size) % K).tolist()))
    labels = np.array([fold_of_run[r] for r in observations.run_index.tolist()])
    folds = [np.flatnonzero(labels == k) for k in range(K)]
    if any(f.size == 0 for f in folds):
        raise ValueError("a fold has no held-out runs")
    return folds


def cross_validate(observations: Observations, design: RunDesign, hyper: Hyperparams,
                   p_range, K: int = 10, seed: int = 0,
                   opt_config: OptimizerConfig | None = None, jobs: int = 1) -> CvResult:
    """K-fold cross-validation of held-out reading MSE over ``p_range``.

    The same fold split is used for every degree.  The recommended degree
    minimizes the mean MSE, ties going to the smaller degree.
    """
    from .parallel import map_ordered

    folds = fold_assignment(observations, K, seed)
    tasks = [(observations, design, hyper, int(p), fold, opt_config)
             for p in p_range for fold in folds]
    mses = map_ordered(_cv_task, tasks, jobs)
    result = CvResult(folds=K)
    for i, p in enumerate(p_range):
        fold_mses = np.array(mses[i * K:(i + 1) * K])
        result.per_degree.append((int(p), fold_mses, float(fold_mses.mean())))
    means = [m for _, _, m in result.per_degree]
    result.recommended_p = result.per_degree[int(np.argmin(means))][0]
    return result


def _cv_task(args):
    observations, design, hyper, p, held, opt_config = args
    keep = np.setdiff1d(np.arange(len(observations)), held)
    hp = Hyperparams(**{**hyper.__dict__, "p": p})
    fit = fit_mle(observations.take(keep), design, hp, opt_config)
    test = observations.take(held)
    pred = predict_readings(design, fit.params, hp, test.run_index)
    return float(np.mean((test.n - pred) ** 2))
