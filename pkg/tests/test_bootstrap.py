import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxcal.bootstrap import (BootstrapConfig, DriftMode, drift_sigma2, parameter_names,
                               percentile_interval, replicate_seed, resample_pairs,
                               residual_bands, run_bootstrap, standard_error, summarize)
from fluxcal.errors import EnsembleQualityError
from fluxcal.model import Observations, RunDesign


def brute_se(v):
    m = sum(v) / len(v)
    return math.sqrt(sum((x - m) ** 2 for x in v) / (len(v) - 1))


def brute_quantile(v, q):
    s = sorted(v)
    pos = q * (len(s) - 1) + 1  # 1-based
    k = int(math.floor(pos))
    if k >= len(s):
        return s[-1]
    return s[k - 1] + (pos - k) * (s[k] - s[k - 1])


class TestSummaries:
    def test_se_example(self):
        assert standard_error([1, 2, 3, 4]) == pytest.approx(1.2909944487358056, rel=1e-15)

    def test_percentile_example(self):
        lo, hi = percentile_interval(np.arange(1, 101), 0.95)
        assert lo == pytest.approx(3.475, abs=1e-12)
        assert hi == pytest.approx(97.525, abs=1e-12)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60))
    def test_se_matches_brute_force(self, v):
        assert standard_error(v) == pytest.approx(brute_se(v), rel=1e-9, abs=1e-9)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=20, max_size=200),
           st.floats(0.5, 0.99))
    def test_percentile_matches_brute_force(self, v, level):
        lo, hi = percentile_interval(v, level)
        assert lo == pytest.approx(brute_quantile(v, (1 - level) / 2), rel=1e-12, abs=1e-9)
        assert hi == pytest.approx(brute_quantile(v, (1 + level) / 2), rel=1e-12, abs=1e-9)
        assert lo <= hi

    def test_percentile_needs_twenty(self):
        with pytest.raises(ValueError):
            percentile_interval(range(19))

    def test_se_needs_two(self):
        with pytest.raises(ValueError):
            standard_error([1.0])


class TestDrift:
    @pytest.mark.parametrize("mode, want", [("none", 0.0), ("independent", 7 * 0.02),
                                            ("correlated", 49 * 0.02)])
    def test_rules(self, mode, want):
        cfg = BootstrapConfig(drift_mode=mode, per_lamp_drift_variance=0.02)
        assert drift_sigma2(cfg, 7) == pytest.approx(want, rel=1e-15)

    def test_explicit(self):
        cfg = BootstrapConfig(drift_mode="explicit", explicit_variance=0.3)
        assert drift_sigma2(cfg, 7) == 0.3

    def test_variance_required(self):
        with pytest.raises(ValueError):
            BootstrapConfig(drift_mode=DriftMode.CORRELATED)
        with pytest.raises(ValueError):
            BootstrapConfig(drift_mode="explicit")

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            BootstrapConfig(B=0)
        with pytest.raises(ValueError):
            BootstrapConfig(drift_mode="independent", per_lamp_drift_variance=-1)
        with pytest.raises(ValueError):
            drift_sigma2(BootstrapConfig(), 0)


class TestResampling:
    def test_seed_derivation(self):
        a = np.random.default_rng(replicate_seed(5, 3)).random()
        b = np.random.default_rng(np.random.SeedSequence([5, 3])).random()
        assert a == b

    def test_pairs_stay_together(self):
        design = RunDesign.sphere(np.eye(4))
        obs = Observations([0, 1, 2, 3], [10.0, 11.0, 12.0, 13.0])
        o, d = resample_pairs(obs, design, 4)
        assert len(o) == 4 and len(d) == 4
        for i in range(4):
            # reading 10 + k always travels with the design row e_k
            k = int(o.n[i] - 10)
            np.testing.assert_array_equal(d.x[o.run_index[i]], np.eye(4)[k])

    def test_bad_input(self):
        with pytest.raises(ValueError):
            resample_pairs(Observations([], []), RunDesign.sphere(np.eye(1)), 0)


@pytest.fixture(scope="module")
def small_ensemble(scenario1):
    obs, design, _, hyper, fit = scenario1
    ens = run_bootstrap(obs, design, hyper, None, BootstrapConfig(B=50, master_seed=12),
                        base_fit=fit)
    return obs, design, hyper, fit, ens


class TestEnsemble:
    def test_counts(self, small_ensemble):
        *_, ens = small_ensemble
        assert len(ens.replicates) + ens.failures == 50
        assert ens.failures <= 2

    def test_deterministic_any_jobs(self, small_ensemble):
        obs, design, hyper, fit, ens = small_ensemble
        other = run_bootstrap(obs, design, hyper, None, BootstrapConfig(B=50, master_seed=12),
                              base_fit=fit, jobs=2)
        np.testing.assert_array_equal(ens.values("beta_1"), other.values("beta_1"))
        assert ens.failed_seeds == other.failed_seeds

    def test_summary(self, small_ensemble):
        *_, fit, ens = small_ensemble
        rows = summarize(fit, ens)
        assert [r["parameter"] for r in rows] == parameter_names(fit)
        b1 = next(r for r in rows if r["parameter"] == "beta_1")
        assert b1["se"] > 0 and b1["lb"] < b1["estimate"] < b1["ub"]

    def test_bands_contain_most_residuals(self, small_ensemble):
        from fluxcal.bootstrap import base_residuals
        obs, design, hyper, fit, ens = small_ensemble
        flux, resid = base_residuals(obs, design, fit)
        bands = residual_bands(obs, design, fit, ens, hyper, flux=flux)
        assert np.all(bands.pred_lo <= bands.conf_lo) and np.all(bands.conf_hi <= bands.pred_hi)
        assert 0.85 < bands.contains(resid).mean() <= 1.0

    def test_quality_threshold(self, scenario1):
        obs, design, _, hyper, fit = scenario1
        # drift this large sends the full scale negative in about half the draws
        cfg = BootstrapConfig(B=20, master_seed=0, drift_mode="explicit", explicit_variance=100.0)
        with pytest.raises(EnsembleQualityError) as info:
            run_bootstrap(obs, design, hyper, None, cfg, base_fit=fit)
        ens = info.value.ensemble
        assert ens.failures > 2 and len(ens.replicates) + ens.failures == 20
        assert ens.failed_seeds == sorted(ens.failed_seeds)


@pytest.mark.slow
def test_drift_widens_low_order_only():
    # same data bootstrapped twice, with and without the full-scale perturbation
    from fluxcal.model import Hyperparams
    from fluxcal.estimator import fit_mle
    from fluxcal.simulator import ScenarioSpec, dataset_seeds, simulate_dataset
    hyper = Hyperparams()
    widths = {"none": [], "correlated": []}
    for data_seed, boot_seed in dataset_seeds(0, 10):
        spec = ScenarioSpec.table(3, seed=data_seed)
        obs, design, _ = simulate_dataset(spec)
        fit = fit_mle(obs, design, hyper)
        for mode in widths:
            var = spec.per_lamp_drift_variance() if mode != "none" else None
            cfg = BootstrapConfig(B=100, master_seed=boot_seed, drift_mode=mode,
                                  per_lamp_drift_variance=var)
            ens = run_bootstrap(obs, design, hyper, None, cfg, base_fit=fit)
            widths[mode].append([np.subtract(*percentile_interval(ens.values(f"beta_{k}"))[::-1])
                                 for k in range(4)])
    w0, w1 = np.mean(widths["none"], axis=0), np.mean(widths["correlated"], axis=0)
    assert w1[0] >= w0[0] and w1[1] >= w0[1]
    np.testing.assert_array_less(np.abs(w1[2:] / w0[2:] - 1), 0.25)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_resample_size_and_membership(seed):
    design = RunDesign.sphere(np.eye(5))
    obs = Observations([0, 1, 2, 3, 4, 4], [1.0, 2, 3, 4, 5, 5.5])
    o, d = resample_pairs(obs, design, seed)
    assert len(o) == len(obs)
    assert set(o.n.tolist()) <= set(obs.n.tolist())
