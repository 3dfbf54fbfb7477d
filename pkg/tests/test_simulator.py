import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxcal.model import Mode
from fluxcal.simulator import (ConjoinerSpec, ScenarioSpec, build_design, conjoiner_design,
                               dataset_seeds, evaluate_scenario, invert_response,
                               simulate_conjoiner, simulate_dataset)

BETA = (0.5, 1.0, 0.022, -0.008)


class TestDesign:
    def test_size_and_states(self):
        d = build_design()
        assert len(d) == 330
        # each pattern of the six plain lamps meets all five aperture states once
        body = np.hstack([d.x[:320], d.xv[:320]])
        assert len({tuple(r) for r in body}) == 320
        assert np.all(d.x[:, -1] + d.xv.sum(axis=1) <= 1)
        # one from the combinations plus five repeats each
        assert np.sum(np.all(d.x == 0, axis=1) & (d.xv.sum(axis=1) == 0)) == 6
        assert np.sum(np.all(d.x == 1, axis=1)) == 6

    def test_conjoiner_pairs(self):
        d = conjoiner_design(3, 2, repeats=2)
        assert d.mode is Mode.CONJOINER
        assert len(d) == 2 * 4 * 3


class TestInvert:
    def test_scenario_polynomial(self):
        phi = np.linspace(0, 1.1, 1000)
        n = invert_response(phi, BETA)
        np.testing.assert_allclose(np.polynomial.polynomial.polyval(n, BETA), phi, atol=1e-10)

    def test_scalar(self):
        assert invert_response(0.5, (0.0, 1.0)) == pytest.approx(0.5, abs=1e-13)

    @given(st.floats(0.5, 2.0), st.floats(-0.05, 0.05), st.floats(0, 1))
    @settings(max_examples=50)
    def test_round_trip(self, b1, b2, phi):
        beta = (0.0, b1, b2 * b1)
        n = invert_response(phi, beta)
        assert np.polynomial.polynomial.polyval(n, beta) == pytest.approx(phi, abs=1e-10)


class TestScenarios:
    def test_table(self):
        assert ScenarioSpec.table(2).drift_mode == "independent"
        assert ScenarioSpec.table(3).drift_mode == "correlated"
        assert ScenarioSpec.table(1).drift_mode == "none"
        with pytest.raises(ValueError):
            ScenarioSpec.table(5)

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            ScenarioSpec(psi_true=(0.5, 0.25, 0.75))
        with pytest.raises(ValueError):
            ScenarioSpec(beta_true=(0.5, 0.0, 0.1))

    def test_reproducible(self):
        a = simulate_dataset(ScenarioSpec.table(2, seed=7))[0].n
        b = simulate_dataset(ScenarioSpec.table(2, seed=7))[0].n
        np.testing.assert_array_equal(a, b)

    def test_correlated_drift_shared(self):
        _, _, truth = simulate_dataset(ScenarioSpec.table(3, seed=1))
        lamp = np.array(truth["run_lamp_flux"])
        base = np.array(truth["phi"])
        ratio = lamp / base
        np.testing.assert_allclose(ratio, ratio[:, :1] * np.ones_like(ratio), rtol=1e-14)
        assert np.all(np.abs(ratio - 1) <= 0.005)
        assert np.ptp(ratio[:, 0]) > 0

    def test_independent_drift_varies(self):
        _, _, truth = simulate_dataset(ScenarioSpec.table(2, seed=1))
        ratio = np.array(truth["run_lamp_flux"]) / np.array(truth["phi"])
        assert np.ptp(ratio[0]) > 0

    def test_scenario4_baselines(self):
        _, _, truth = simulate_dataset(ScenarioSpec.table(4, seed=3))
        phi = np.array(truth["phi"])
        assert phi.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.abs(phi * 7 - 1) < 0.06)
        assert np.ptp(phi) > 0

    def test_noise_free_readings_invert_exactly(self):
        obs, design, truth = simulate_dataset(
            ScenarioSpec.table(1, seed=0, shot_coeff=0.0, elec_sd=0.0))
        back = np.polynomial.polynomial.polyval(obs.n, BETA)
        np.testing.assert_allclose(back, truth["run_flux"], atol=1e-12)

    def test_drift_variance(self):
        spec = ScenarioSpec.table(3)
        half = 0.005 / 7
        assert spec.per_lamp_drift_variance() == pytest.approx(half ** 2 / 3, rel=1e-15)


def test_dataset_seeds_prefix_consistent():
    assert dataset_seeds(4, 3) == dataset_seeds(4, 10)[:3]
    assert len(set(dataset_seeds(4, 50))) == 50


def test_conjoiner_defaults():
    obs, design, truth, hyper = simulate_conjoiner(ConjoinerSpec(seed=1))
    assert hyper.kappa0 == 0.2 and hyper.phi_max == 2.0
    flux = np.array(truth["run_flux"])
    assert flux.max() < hyper.phi_max
    assert len(obs) == len(design)


def test_evaluation_report_shapes():
    rep = evaluate_scenario(1, n_datasets=2, B=20, seed=3)
    assert rep.estimates.shape == rep.truth.shape == (2, 4 + 3 + 7)
    cov = rep.coverage()
    hit = (rep.lower <= rep.truth) & (rep.truth <= rep.upper)
    assert cov["beta_1"] == hit[:, rep.names.index("beta_1")].mean()
    assert rep.seeds == [a for a, _ in dataset_seeds(3, 2)]
    assert len(rep.table()) == len(rep.names)


def test_quick_study_profile(quick):
    if not quick:
        pytest.skip("run with --quick")
    import time
    t = time.perf_counter()
    evaluate_scenario(1, quick=True, seed=0)
    assert time.perf_counter() - t < 300
