import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxcal.bootstrap import BootstrapEnsemble
from fluxcal.calibration import (CalibrationRef, ExtrapolationWarning, apply_calibration,
                                 calibrate, legacy_ls_fit, linearize)
from fluxcal.cli import nonlinearity_curves
from fluxcal.errors import CalibrationDomainError
from fluxcal.estimator import fit_mle
from fluxcal.model import FitResult, Hyperparams, ModelParams
from fluxcal.simulator import ScenarioSpec, simulate_dataset


def fake_fit(beta, alpha=(0.5, 0.5)):
    params = ModelParams(phi=[1.0], alpha=list(alpha), gamma=1.0, sigma=1.0)
    return FitResult(params=params, beta=np.asarray(beta, dtype=float),
                     fitted_fluxes=np.array([0.0, 1.0]), loglik=0.0, converged=True,
                     iterations=0, phi_max=1.0, grad_norm=0.0)


def fake_ensemble(betas):
    return BootstrapEnsemble(replicates=[fake_fit(b) for b in betas], failures=0,
                             seeds=list(range(len(betas))))


class TestCalibrate:
    def test_identity(self):
        res = calibrate(fake_fit([0, 1, 0, 0]), None, CalibrationRef(0.5, 0.5))
        assert res.rho_hat == 1.0

    def test_doubling(self):
        res = calibrate(fake_fit([0, 2, 0, 0]), None, CalibrationRef(0.5, 0.5))
        assert res.rho_hat == 0.5

    def test_domain_error(self):
        with pytest.raises(CalibrationDomainError):
            calibrate(fake_fit([-1, 1]), None, CalibrationRef(0.5, 0.5))
        with pytest.raises(CalibrationDomainError):
            calibrate(fake_fit([0, 1]), fake_ensemble([[-1, 1]]), CalibrationRef(0.5, 0.5))

    def test_ref_invariants(self):
        with pytest.raises(ValueError):
            CalibrationRef(0.0, 0.5)
        with pytest.raises(ValueError):
            CalibrationRef(1.0, np.inf)

    def test_degenerate_ensemble(self):
        beta = [0.01, 0.9, 0.05]
        res = calibrate(fake_fit(beta), fake_ensemble([beta] * 5), CalibrationRef(0.4, 0.45))
        n = np.linspace(0.1, 0.9, 9)
        point, reps = apply_calibration(res, n)
        assert reps.shape == (5, 9)
        assert np.all(reps == point)

    @given(st.floats(0.01, 0.99), st.floats(0.1, 10), st.floats(1e-3, 1e3))
    @settings(max_examples=50)
    def test_scale_equivariance(self, n_ref, phi_ref, c):
        beta = [0.02, 0.95, 0.04, -0.01]
        fit = fake_fit(beta)
        ens = fake_ensemble([[0.02, 0.96, 0.03, -0.01], [0.01, 0.94, 0.05, -0.012]])
        n = np.linspace(0, 1, 11)
        a_pt, a_rep = apply_calibration(calibrate(fit, ens, CalibrationRef(phi_ref, n_ref)), n)
        b_pt, b_rep = apply_calibration(calibrate(fit, ens, CalibrationRef(c * phi_ref, n_ref)), n)
        np.testing.assert_allclose(b_pt, c * a_pt, rtol=1e-14, atol=1e-300)
        np.testing.assert_allclose(b_rep, c * a_rep, rtol=1e-14, atol=1e-300)

    @given(st.lists(st.floats(-0.05, 0.05), min_size=2, max_size=4), st.floats(0.05, 0.95),
           st.floats(0.1, 5))
    @settings(max_examples=50)
    def test_pinch_bit_exact(self, curvature, n_ref, phi_ref):
        beta = [0.0, 1.0] + curvature
        reps = [[0.001 * k, 1.0 + 0.01 * k] + curvature for k in range(1, 6)]
        res = calibrate(fake_fit(beta), fake_ensemble(reps), CalibrationRef(phi_ref, n_ref))
        point, rep = apply_calibration(res, n_ref)
        assert point == phi_ref
        assert np.all(rep == phi_ref)

    def test_extrapolation_warns(self):
        res = calibrate(fake_fit([0, 1]), None, CalibrationRef(0.5, 0.5))
        with pytest.warns(ExtrapolationWarning):
            apply_calibration(res, 1.5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            apply_calibration(res, 0.5)

    def test_identity_response_is_identity_map(self, design):
        spec = ScenarioSpec.table(1, seed=0, shot_coeff=0.0, elec_sd=0.0,
                                  beta_true=(0.0, 1.0, 0.0, 0.0))
        obs, _, _ = simulate_dataset(spec, design)
        # noise-free identity data sit on the degenerate edge of the
        # objective; only the calibrated map is asserted here
        fit = fit_mle(obs, design, Hyperparams())
        res = calibrate(fit, None, CalibrationRef(0.5, 0.5))
        n = np.linspace(0.0, 1.0, 101)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            point, _ = apply_calibration(res, n)
        np.testing.assert_allclose(point, n, atol=1e-10)


def test_linearize_horner():
    assert linearize([1, 2, 3], 2.0) == 1 + 4 + 12
    np.testing.assert_array_equal(linearize([0.5], np.zeros(3)), [0.5] * 3)


class TestLegacy:
    def test_linear_noiseless_zero_objective(self, design):
        spec = ScenarioSpec.table(1, seed=0, shot_coeff=0.0, elec_sd=0.0,
                                  beta_true=(0.0, 1.0, 0.0, 0.0))
        obs, _, truth = simulate_dataset(spec, design)
        leg = legacy_ls_fit(obs, design, Hyperparams())
        assert leg.objective < 1e-20
        np.testing.assert_allclose(leg.beta, [0, 1, 0, 0], atol=1e-10)
        np.testing.assert_allclose(leg.run_fluxes, truth["run_flux"], atol=1e-10)

    def test_anchor(self, scenario1):
        obs, design, _, hyper, _ = scenario1
        leg = legacy_ls_fit(obs, design, hyper)
        assert leg.converged
        assert leg.run_fluxes.max() == pytest.approx(1.0, abs=1e-3)
        assert np.all(leg.phi > 0) and np.all((leg.psi > 0) & (leg.psi < 1))
        n = leg.reading_at(0.5)
        assert linearize(leg.beta, n) == pytest.approx(0.5, abs=1e-12)

    def test_noiseless_linear_curves_vanish(self, design):
        spec = ScenarioSpec.table(1, seed=0, shot_coeff=0.0, elec_sd=0.0,
                                  beta_true=(0.0, 1.0, 0.0, 0.0))
        obs, _, _ = simulate_dataset(spec, design)
        hyper = Hyperparams()
        fit = fit_mle(obs, design, hyper)
        leg = legacy_ls_fit(obs, design, hyper, phi_max=float(fit.fitted_fluxes.max()))
        grid = np.linspace(0, 1, 51)
        mle, lg, reps = nonlinearity_curves(fit, BootstrapEnsemble([], 0, []), leg, grid)
        assert np.max(np.abs(mle)) < 1e-8 and np.max(np.abs(lg)) < 1e-8 and reps == []

    @staticmethod
    def peak_position(obs, design, hyper, fit):
        top = float(fit.fitted_fluxes.max())
        leg = legacy_ls_fit(obs, design, hyper, phi_max=top)
        grid = np.linspace(0, top, 201)
        mle, lg, _ = nonlinearity_curves(fit, BootstrapEnsemble([], 0, []), leg, grid)
        return grid[np.argmax(np.abs(lg - mle))] / top

    def test_largest_discrepancy_in_top_decile(self, conjoiner_pipeline):
        obs, design, _, hyper, fit, _ = conjoiner_pipeline
        assert self.peak_position(obs, design, hyper, fit) >= 0.9

    @pytest.mark.slow
    @pytest.mark.xfail(strict=True, reason="on most synthetic two-beam datasets the "
                       "discrepancy peaks near 0.8-0.9 of full scale, below the top decile")
    def test_top_decile_across_datasets(self):
        from fluxcal.simulator import ConjoinerSpec, dataset_seeds, simulate_conjoiner
        where = []
        for seed, _ in dataset_seeds(0, 8):
            obs, design, _, hyper = simulate_conjoiner(ConjoinerSpec(seed=seed))
            where.append(self.peak_position(obs, design, hyper, fit_mle(obs, design, hyper)))
        assert min(where) >= 0.9, where
