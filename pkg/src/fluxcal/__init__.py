"""Flux-addition linearity characterization.

Fits the nonlinear response of an indicating instrument from readings taken
under every on/off combination of several stable sources, and quantifies the
uncertainty of the fit with a pairs bootstrap.
"""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .bootstrap import (BootstrapConfig, BootstrapEnsemble, DriftMode,  # noqa: E402
                        percentile_interval, residual_bands, run_bootstrap, standard_error,
                        summarize)
from .calibration import (CalibrationRef, CalibrationResult, apply_calibration,  # noqa: E402
                          calibrate, legacy_ls_fit)
from .errors import (CalibrationDomainError, EnsembleQualityError, FluxcalError,  # noqa: E402
                     OptimizationError, SingularFitError, UnderdeterminedError)
from .estimator import OptimizerConfig, cross_validate, derive_beta, fit_mle  # noqa: E402
from .model import (FitResult, Hyperparams, Mode, ModelParams, NoiseModel,  # noqa: E402
                    Observation, Observations, RunDesign, legendre_eval, penalized_loglik)
from .simulator import (ConjoinerSpec, ScenarioSpec, evaluate_scenario,  # noqa: E402
                        invert_response, simulate_conjoiner, simulate_dataset)

__all__ = [
    "BACKEND", "BootstrapConfig", "BootstrapEnsemble", "CalibrationDomainError",
    "CalibrationRef", "CalibrationResult", "ConjoinerSpec", "DriftMode",
    "EnsembleQualityError", "FitResult", "FluxcalError", "Hyperparams", "Mode",
    "ModelParams", "NoiseModel", "Observation", "Observations", "OptimizationError",
    "OptimizerConfig", "RunDesign", "ScenarioSpec", "SingularFitError",
    "UnderdeterminedError", "apply_calibration", "calibrate", "cross_validate",
    "derive_beta", "evaluate_scenario", "fit_mle", "invert_response", "legacy_ls_fit",
    "legendre_eval", "penalized_loglik", "percentile_interval", "residual_bands",
    "run_bootstrap", "simulate_conjoiner", "simulate_dataset", "standard_error",
    "summarize",
]
