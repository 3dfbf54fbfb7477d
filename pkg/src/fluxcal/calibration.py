"""Single-point calibration and the legacy least-squares linearization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from .bootstrap import BootstrapEnsemble
from .errors import CalibrationDomainError, OptimizationError, UnderdeterminedError
from .estimator import OptimizerConfig
from .model import FitResult, Hyperparams, Observations, RunDesign, expected_reading
from .optimize import maximize


class ExtrapolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationRef:
    phi_ref: float
    n_ref: float

    def __post_init__(self):
        if not self.phi_ref > 0:
            raise ValueError("phi_ref must be positive")
        if not np.isfinite(self.n_ref):
            raise ValueError("n_ref must be finite")


def linearize(beta, n):
    """Evaluate ``beta_0 + sum beta_m n**m`` (Horner)."""
    beta = np.asarray(beta, dtype=float)
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n) + beta[-1]
    for c in beta[-2::-1]:
        out = out * n + c
    return out


@dataclass
class CalibrationResult:
    ref: CalibrationRef
    rho_hat: float
    rho_replicates: np.ndarray
    beta: np.ndarray
    beta_replicates: np.ndarray
    reading_range: tuple[float, float]

    @property
    def phi_ref_hat(self) -> float:
        return float(linearize(self.beta, self.ref.n_ref))


def calibrate(fit: FitResult, ensemble: BootstrapEnsemble | None,
              ref: CalibrationRef) -> CalibrationResult:
    """Fix the flux scale so the reference reading maps to the reference flux."""
    phi_hat = float(linearize(fit.beta, ref.n_ref))
    if not phi_hat > 0:
        raise CalibrationDomainError(f"linearized reference flux {phi_hat:g} is not positive")
    reps = ensemble.replicates if ensemble is not None else []
    beta_reps = np.array([r.beta for r in reps]).reshape(len(reps), fit.beta.size)
    phi_reps = np.array([float(linearize(b, ref.n_ref)) for b in beta_reps])
    if np.any(phi_reps <= 0):
        raise CalibrationDomainError("a replicate's linearized reference flux is not positive")
    flux = fit.fitted_fluxes
    if flux.size:
        ends = expected_reading(np.array([flux.min(), flux.max()]), fit.params.alpha,
                                fit.phi_max)
        reading_range = (float(ends.min()), float(ends.max()))
    else:
        reading_range = (-np.inf, np.inf)
    return CalibrationResult(ref=ref, rho_hat=ref.phi_ref / phi_hat,
                             rho_replicates=ref.phi_ref / phi_reps, beta=fit.beta.copy(),
                             beta_replicates=beta_reps, reading_range=reading_range)


def apply_calibration(result: CalibrationResult, n):
    """Calibrated flux at reading(s) ``n`` and its bootstrap replicates.

    Evaluated as ``phi_ref * (h(n) / h(n_ref))`` so that ``n == n_ref``
    returns ``phi_ref`` exactly for the estimate and every replicate.
    Replicates come back with shape ``(B,) + shape(n)``.
    """
    n_arr = np.asarray(n, dtype=float)
    lo, hi = result.reading_range
    if np.any(n_arr < lo) or np.any(n_arr > hi):
        warnings.warn("reading outside the fitted range; extrapolating", ExtrapolationWarning)
    ref = result.ref
    point = ref.phi_ref * (linearize(result.beta, n_arr) / linearize(result.beta, ref.n_ref))
    reps = np.array([ref.phi_ref * (linearize(b, n_arr) / linearize(b, ref.n_ref))
                     for b in result.beta_replicates]).reshape((-1,) + n_arr.shape)
    if n_arr.ndim == 0:
        point = float(point)
    return point, reps


@dataclass
class LegacyFit:
    beta: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    run_fluxes: np.ndarray
    objective: float
    converged: bool
    phi_max: float

    def reading_at(self, flux):
        """Reading whose linearized value equals ``flux``."""
        from .simulator import invert_response
        return invert_response(flux, self.beta)


def legacy_ls_fit(observations: Observations, design: RunDesign, hyper: Hyperparams,
                  opt_config: OptimizerConfig | None = None,
                  phi_max: float | None = None) -> LegacyFit:
    """Least-squares linearization anchored by the largest run flux.

    Minimizes ``(phi_max - max_i Phi_i)**2 + sum_i (h(n_i) - Phi_i)**2`` over
    the monomial coefficients of ``h`` (degree ``hyper.p``) and the
    nonnegative source fluxes.  ``phi_max`` overrides the anchor value.
    """
    cfg = opt_config or OptimizerConfig()
    anchor = hyper.phi_max if phi_max is None else float(phi_max)
    observations.validate(design)
    X, V = design.flux_matrix()
    X = X[observations.run_index]
    V = V[observations.run_index]
    n = observations.n
    J, Nv, p = X.shape[1], V.shape[1], hyper.p
    if len(observations) < J + Nv + p + 1:
        raise UnderdeterminedError("too few observations for the legacy fit")
    mid = 0.5 * (n.max() + n.min())
    half = 0.5 * (n.max() - n.min()) or 1.0
    A = np.vander((n - mid) / half, p + 1, increasing=True)

    def fluxes(theta):
        phi = np.exp(theta[:J])
        psi = 1.0 / (1.0 + np.exp(-theta[J:J + Nv]))
        flux = X @ phi
        ap = V @ psi if Nv else None
        if Nv:
            flux = flux + phi[-1] * ap
        return phi, psi, ap, flux

    def value_grad(theta):
        phi, psi, ap, flux = fluxes(theta)
        c = theta[J + Nv:]
        e = A @ c - flux
        k = int(np.argmax(flux))
        gap = anchor - flux[k]
        value = gap * gap + e @ e
        d_flux = -2.0 * e
        d_flux[k] += -2.0 * gap
        d_phi = X.T @ d_flux
        d_psi = np.zeros(Nv)
        if Nv:
            d_phi[-1] += ap @ d_flux
            d_psi = phi[-1] * (V.T @ d_flux)
        grad = np.concatenate([d_phi * phi, d_psi * psi * (1 - psi), 2.0 * A.T @ e])
        return -value, -grad

    bs = design.beam_sizes
    if bs is None:
        phi0 = np.full(J, anchor / J)
    else:
        phi0 = np.concatenate([np.full(bs[0], anchor / (2 * bs[0])),
                               np.full(bs[1], anchor / (2 * bs[1]))])
    psi0 = np.arange(1, Nv + 1) / (Nv + 1)
    theta0 = np.concatenate([np.log(phi0), np.log(psi0 / (1 - psi0)), np.zeros(p + 1)])
    _, _, _, flux0 = fluxes(theta0)
    theta0[J + Nv:] = np.linalg.lstsq(A, flux0, rcond=None)[0]
    try:
        out = maximize(value_grad, theta0, gtol=cfg.gradient_tolerance,
                       max_iter=cfg.max_iterations)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise OptimizationError(str(exc)) from exc
    phi, psi, _, _ = fluxes(out.x)
    coef = out.x[J + Nv:]
    mono = Polynomial(coef)(Polynomial([-mid / half, 1.0 / half])).coef
    beta = np.zeros(p + 1)
    beta[:mono.size] = mono
    Xd, Vd = design.flux_matrix()
    run_flux = Xd @ phi + (phi[-1] * (Vd @ psi) if Nv else 0.0)
    return LegacyFit(beta=beta, phi=phi, psi=psi, run_fluxes=run_flux,
                     objective=-out.value, converged=out.converged, phi_max=anchor)
