import warnings

import numpy as np
import pytest

from fluxcal.model import Hyperparams
from fluxcal.simulator import ScenarioSpec, build_design, simulate_dataset

ACCEPTANCE_LINES: list[str] = []
# shared with the acceptance module without making tests a package
pytest.acceptance_lines = ACCEPTANCE_LINES


def pytest_addoption(parser):
    parser.addoption("--quick", action="store_true", default=False,
                     help="run the coverage study at 10 datasets x B=100 (informational)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def quick(request):
    return request.config.getoption("--quick")


@pytest.fixture(scope="session")
def design():
    return build_design()


@pytest.fixture(scope="session")
def scenario1(design):
    """One noisy scenario-1 dataset and its fit."""
    from fluxcal.estimator import fit_mle

    obs, _, truth = simulate_dataset(ScenarioSpec.table(1, seed=11), design)
    hyper = Hyperparams()
    return obs, design, truth, hyper, fit_mle(obs, design, hyper)


@pytest.fixture(scope="session")
def noise_free(design):
    from fluxcal.estimator import fit_mle

    spec = ScenarioSpec.table(1, seed=0, shot_coeff=0.0, elec_sd=0.0)
    obs, _, truth = simulate_dataset(spec, design)
    # without noise the true response must lie inside the model family and the
    # scale constraint must be tight; degree 3 cannot represent the inverse of
    # a cubic exactly
    hyper = Hyperparams(p=5, tau=1e-5)
    return obs, design, truth, hyper, fit_mle(obs, design, hyper)


@pytest.fixture(scope="session")
def conjoiner_pipeline():
    """Synthetic two-beam dataset with its fit and a B=300 ensemble."""
    from fluxcal.bootstrap import BootstrapConfig, run_bootstrap
    from fluxcal.estimator import fit_mle
    from fluxcal.simulator import ConjoinerSpec, dataset_seeds, simulate_conjoiner

    data_seed, boot_seed = dataset_seeds(0, 1)[0]
    obs, design, truth, hyper = simulate_conjoiner(ConjoinerSpec(seed=data_seed))
    fit = fit_mle(obs, design, hyper)
    ens = run_bootstrap(obs, design, hyper, None, BootstrapConfig(B=300, master_seed=boot_seed),
                        base_fit=fit)
    return obs, design, truth, hyper, fit, ens


@pytest.fixture(scope="session")
def scenario1_study(quick):
    """The scenario-1 Monte-Carlo run shared by the bias and coverage checks."""
    from fluxcal.simulator import evaluate_scenario

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if quick:
            return evaluate_scenario(1, quick=True, seed=0)
        return evaluate_scenario(1, n_datasets=25, B=300, seed=0)


@pytest.fixture(scope="session")
def scenario3_study(quick):
    from fluxcal.simulator import evaluate_scenario

    return evaluate_scenario(3, n_datasets=10, B=100 if quick else 300, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
