"""Domain types and the forward model for flux-addition experiments.

Readings ``n_i`` are modelled as Gaussian around a Legendre expansion of the
run flux mapped onto ``[-1, 1]``.  The run flux is a sum of lamp (or beam
filter) fluxes selected by binary indicators.  Shrinkage priors on the
Legendre coefficients and on the total flux make the problem identifiable;
:func:`penalized_loglik` evaluates the resulting objective up to constants.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np


class Mode(str, enum.Enum):
    SPHERE = "sphere"
    CONJOINER = "conjoiner"


class NoiseModel(str, enum.Enum):
    CONSTANT = "constant"
    PIECEWISE = "piecewise"


class DesignWarning(UserWarning):
    pass


def _as_flags(a, ncols: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 0 and a.ndim != 2:
        a = a.reshape(0, ncols)
    if a.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional")
    if not np.all((a == 0.0) | (a == 1.0)):
        raise ValueError(f"{name} entries must be 0 or 1")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RunDesign:
    """Indicator layout of an experiment, one row per run.

    In sphere mode ``x`` holds the ``J`` lamp flags (the last lamp is the
    variable-aperture lamp) and ``xv`` its ``N_v`` reduced-aperture states.
    In conjoiner mode ``x`` holds the beam-1 filter flags and ``xv`` the
    beam-2 filter flags.
    """

    mode: Mode
    x: np.ndarray
    xv: np.ndarray

    def __post_init__(self):
        mode = Mode(self.mode)
        x = _as_flags(self.x, 0, "x")
        xv = np.asarray(self.xv, dtype=float)
        if xv.size == 0:
            xv = np.zeros((x.shape[0], 0))
        xv = _as_flags(xv, 0, "xv")
        if xv.shape[0] != x.shape[0]:
            raise ValueError("x and xv must have the same number of rows")
        if mode is Mode.SPHERE:
            if x.shape[1] < 1:
                raise ValueError("sphere design needs at least one lamp")
            if np.any(x[:, -1] + xv.sum(axis=1) > 1):
                raise ValueError(
                    "at most one of the full/variable aperture states may be on per run")
        else:
            if np.any(x.sum(axis=1) > 1) or np.any(xv.sum(axis=1) > 1):
                raise ValueError("at most one filter setting per beam may be on per run")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xv", xv)

    @classmethod
    def sphere(cls, x, xv=None) -> "RunDesign":
        x = np.asarray(x, dtype=float)
        if xv is None:
            xv = np.zeros((x.shape[0], 0))
        return cls(Mode.SPHERE, x, xv)

    @classmethod
    def conjoiner(cls, x1, x2) -> "RunDesign":
        return cls(Mode.CONJOINER, x1, x2)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_fluxes(self) -> int:
        """Number of free lamp/filter fluxes."""
        if self.mode is Mode.SPHERE:
            return self.x.shape[1]
        return self.x.shape[1] + self.xv.shape[1]

    @property
    def n_aperture(self) -> int:
        return self.xv.shape[1] if self.mode is Mode.SPHERE else 0

    @property
    def beam_sizes(self) -> tuple[int, int] | None:
        if self.mode is Mode.CONJOINER:
            return self.x.shape[1], self.xv.shape[1]
        return None

    def flux_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, V)`` with ``Phi = X @ phi + phi[-1] * (V @ psi)``.

        ``V`` has zero columns in conjoiner mode.
        """
        if self.mode is Mode.SPHERE:
            return self.x, self.xv
        return np.hstack([self.x, self.xv]), np.zeros((len(self), 0))

    def take(self, rows) -> "RunDesign":
        rows = np.asarray(rows, dtype=int)
        return RunDesign(self.mode, self.x[rows], self.xv[rows])

    def check_coverage(self) -> None:
        """Warn when the design lacks a dark run or a maximal-flux run."""
        X, _ = self.flux_matrix()
        total = X.sum(axis=1) + self.xv.sum(axis=1) * (self.mode is Mode.SPHERE)
        if not np.any(total == 0):
            warnings.warn("design has no run with every source off", DesignWarning)
        if self.mode is Mode.SPHERE:
            full = np.all(self.x == 1, axis=1)
        else:
            full = (self.x.sum(axis=1) == 1) & (self.xv.sum(axis=1) == 1)
        if not np.any(full):
            warnings.warn("design has no maximal-flux run", DesignWarning)


class Observation(NamedTuple):
    run_index: int
    n: float


@dataclass(frozen=True, eq=False)
class Observations:
    """Readings paired with the design row that produced each one."""

    run_index: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.run_index, dtype=np.int64).copy()
        n = np.asarray(self.n, dtype=float).copy()
        if idx.shape != n.shape or idx.ndim != 1:
            raise ValueError("run_index and n must be 1-d arrays of equal length")
        if not np.all(np.isfinite(n)):
            raise ValueError("readings must be finite")
        idx.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "run_index", idx)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_readings(cls, n) -> "Observations":
        """One reading per design row, in row order."""
        n = np.asarray(n, dtype=float)
        return cls(np.arange(n.size), n)

    def __len__(self) -> int:
        return self.n.size

    def __iter__(self) -> Iterator[Observation]:
        for i, v in zip(self.run_index, self.n):
            yield Observation(int(i), float(v))

    def take(self, rows) -> "Observations":
        rows = np.asarray(rows, dtype=int)
        return Observations(self.run_index[rows], self.n[rows])

    def validate(self, design: RunDesign) -> None:
        if len(self) and (self.run_index.min() < 0 or self.run_index.max() >= len(design)):
            raise ValueError("run_index out of range for the design")


@dataclass(frozen=True)
class Hyperparams:
    """Fixed inputs of the model.

    ``lambda_rate`` is the rate of the exponential penalty on ``gamma``;
    :meth:`from_prior_mean` builds it from a prior mean instead.
    """

    phi_max: float = 1.0
    tau: float = 1e-3
    lambda_rate: float = 1.0
    p: int = 3
    kappa0: float = 1.0
    noise_model: NoiseModel = NoiseModel.CONSTANT

    def __post_init__(self):
        object.__setattr__(self, "noise_model", NoiseModel(self.noise_model))
        if not self.phi_max > 0:
            raise ValueError("phi_max must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.lambda_rate > 0:
            raise ValueError("lambda_rate must be positive")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("p must be an integer >= 1")
        if not 0 < self.kappa0 <= 1:
            raise ValueError("kappa0 must lie in (0, 1]")

    @classmethod
    def from_prior_mean(cls, phi_max: float = 1.0, gamma_prior_mean: float | None = None,
                        tau: float | None = None, **kw) -> "Hyperparams":
        """Build from the prior mean of ``gamma``; both it and ``tau`` default
        to values proportional to ``phi_max``."""
        if gamma_prior_mean is None:
            gamma_prior_mean = phi_max
        if tau is None:
            tau = 1e-3 * phi_max
        if not gamma_prior_mean > 0:
            raise ValueError("gamma_prior_mean must be positive")
        return cls(phi_max=phi_max, tau=tau, lambda_rate=1.0 / gamma_prior_mean, **kw)

    def with_phi_max(self, phi_max: float) -> "Hyperparams":
        return replace(self, phi_max=phi_max)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter vector.

    ``phi`` holds every lamp flux; in conjoiner mode it is the beam-1 fluxes
    followed by the beam-2 fluxes (see :attr:`phi1`, :attr:`phi2`).
    """

    phi: np.ndarray
    alpha: np.ndarray
    gamma: float
    sigma: float
    psi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beam_sizes: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("phi", "alpha", "psi"):
            a = np.array(getattr(self, name), dtype=float).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.beam_sizes is not None:
            object.__setattr__(self, "beam_sizes", tuple(int(v) for v in self.beam_sizes))
            if sum(self.beam_sizes) != self.phi.size:
                raise ValueError("beam_sizes do not add up to the number of fluxes")

    @property
    def p(self) -> int:
        return self.alpha.size - 1

    @property
    def phi1(self) -> np.ndarray:
        if self.beam_sizes is None:
            raise AttributeError("phi1 is only defined in conjoiner mode")
        return self.phi[: self.beam_sizes[0]]

    @property
    def phi2(self) -> np.ndarray:
        if self.beam_sizes is None:
            raise AttributeError("phi2 is only defined in conjoiner mode")
        return self.phi[self.beam_sizes[0]:]

    def check(self) -> None:
        if not self.gamma > 0 or not self.sigma > 0:
            raise ValueError("gamma and sigma must be positive")
        if np.any(self.phi < 0):
            raise ValueError("fluxes must be nonnegative")
        if np.any((self.psi < 0) | (self.psi > 1)):
            raise ValueError("aperture fractions must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one maximization of the penalized likelihood.

    ``phi_max`` records the scale actually used, which differs from the
    configured value for drift-perturbed bootstrap replicates.
    """

    params: ModelParams
    beta: np.ndarray
    fitted_fluxes: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    phi_max: float
    grad_norm: float = float("nan")
    hessian: np.ndarray | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# Elementary pieces
# --------------------------------------------------------------------------

def legendre_eval(m: int, x):
    """Legendre polynomial ``P_m(x)`` by the three-term recurrence.

    Arguments slightly outside ``[-1, 1]`` (by at most 1e-12) are clamped.
    """
    if int(m) != m or m < 0:
        raise ValueError("order must be a nonnegative integer")
    m = int(m)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.where(np.abs(x) <= 1 + 1e-12, np.clip(x, -1.0, 1.0), x)
    prev = np.ones_like(x)
    if m == 0:
        out = prev
    else:
        cur = x.copy()
        for k in range(1, m):
            prev, cur = cur, ((2 * k + 1) * x * cur - k * prev) / (k + 1)
        out = cur
    return float(out) if scalar else out


def legendre_basis(t, p: int) -> np.ndarray:
    """Columns ``P_0(t) .. P_p(t)``; no clamping."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (p + 1,))
    out[..., 0] = 1.0
    if p >= 1:
        out[..., 1] = t
    for k in range(1, p):
        out[..., k + 1] = ((2 * k + 1) * t * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


def _scalar_or_array(a):
    return float(a) if np.ndim(a) == 0 else a


def scale_to_unit(phi, phi_max: float):
    """Map flux on ``[0, phi_max]`` linearly onto ``[-1, 1]``."""
    if not phi_max > 0:
        raise ValueError("phi_max must be positive")
    return _scalar_or_array(2.0 * np.asarray(phi, dtype=float) / phi_max - 1.0)


def scale_from_unit(t, phi_max: float):
    if not phi_max > 0:
        raise ValueError("phi_max must be positive")
    return _scalar_or_array((np.asarray(t, dtype=float) + 1.0) * (0.5 * phi_max))


def compose_flux(design: RunDesign, params: ModelParams, rows=None) -> np.ndarray | float:
    """Run fluxes for the requested design rows (all rows by default).

    Passing a single integer row returns a float.
    """
    if params.phi.size != design.n_fluxes or params.psi.size != design.n_aperture:
        raise ValueError(
            f"parameter dimensions (phi={params.phi.size}, psi={params.psi.size}) do not "
            f"match the design (phi={design.n_fluxes}, psi={design.n_aperture})")
    X, V = design.flux_matrix()
    single = rows is not None and np.ndim(rows) == 0
    if rows is not None:
        X = X[np.atleast_1d(rows)]
        V = V[np.atleast_1d(rows)]
    flux = X @ params.phi
    if V.shape[1]:
        flux = flux + params.phi[-1] * (V @ params.psi)
    return float(flux[0]) if single else flux


def expected_reading(phi, alpha, phi_max: float):
    """Mean instrument reading at flux ``phi`` for Legendre coefficients ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    t = scale_to_unit(phi, phi_max)
    return _scalar_or_array(legendre_basis(t, alpha.size - 1) @ alpha)


def _noise_scale(phi, hyper: Hyperparams):
    phi = np.asarray(phi, dtype=float)
    if hyper.noise_model is NoiseModel.CONSTANT:
        return np.ones_like(phi)
    knee = hyper.kappa0 * hyper.phi_max
    return np.where(phi > knee, phi, knee)


def noise_sd(phi, params: ModelParams | float, hyper: Hyperparams):
    """Reading noise standard deviation at flux ``phi``.

    Constant below ``kappa0 * phi_max`` and proportional to flux above it in
    the piecewise model; ``params`` may be a bare ``sigma``.
    """
    sigma = params.sigma if isinstance(params, ModelParams) else float(params)
    return _scalar_or_array(sigma * _noise_scale(phi, hyper))


def penalized_loglik(observations: Observations, design: RunDesign, params: ModelParams,
                     hyper: Hyperparams) -> float:
    """Penalized log-likelihood, additive constants dropped."""
    if not params.sigma > 0 or not params.gamma > 0:
        raise ValueError("sigma and gamma must be positive")
    if params.alpha.size != hyper.p + 1:
        raise ValueError("alpha must have p + 1 entries")
    observations.validate(design)
    flux = compose_flux(design, params)[observations.run_index]
    resid = observations.n - expected_reading(flux, params.alpha, hyper.phi_max)
    sd = noise_sd(flux, params, hyper)
    data = -0.5 * np.sum((resid / sd) ** 2) - np.sum(np.log(sd))
    total = -0.5 * (params.phi.sum() - hyper.phi_max) ** 2 / hyper.tau ** 2
    g2 = params.gamma ** 2
    slope = -0.5 * (params.alpha[1] - 0.5 * hyper.phi_max) ** 2 / g2 - math.log(params.gamma)
    higher = -0.5 * np.sum(params.alpha[2:] ** 2) / g2 - (hyper.p - 1) * math.log(params.gamma)
    return float(data + total + slope + higher - hyper.lambda_rate * params.gamma)
