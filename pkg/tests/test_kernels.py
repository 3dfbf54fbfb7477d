import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxcal import _backend, _kernels_py
from fluxcal.estimator import Objective
from fluxcal.model import (Hyperparams, NoiseModel, Observations, RunDesign,
                           penalized_loglik)
from fluxcal.optimize import fd_hessian, maximize

try:
    from fluxcal import _kernels
except ImportError:  # pragma: no cover - extension not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled kernel not built")


def problem(seed, piecewise=False, conjoiner=False, N=40):
    rng = np.random.default_rng(seed)
    if conjoiner:
        x = np.zeros((N, 3))
        xv = np.zeros((N, 2))
        x[np.arange(N), rng.integers(0, 3, N)] = rng.integers(0, 2, N)
        xv[np.arange(N), rng.integers(0, 2, N)] = rng.integers(0, 2, N)
        design = RunDesign.conjoiner(x, xv)
    else:
        x = rng.integers(0, 2, (N, 4)).astype(float)
        xv = np.zeros((N, 2))
        off = np.flatnonzero(x[:, -1] == 0)
        xv[off, rng.integers(0, 2, off.size)] = rng.integers(0, 2, off.size)
        design = RunDesign.sphere(x, xv)
    hyper = Hyperparams(phi_max=1.3, tau=0.05, lambda_rate=0.7, p=4, kappa0=0.3,
                        noise_model=NoiseModel.PIECEWISE if piecewise else NoiseModel.CONSTANT)
    obs = Observations(np.arange(N), rng.normal(0.5, 0.3, N))
    obj = Objective(obs, design, hyper)
    theta = rng.normal(0, 0.3, obj.size)
    theta[:obj.J] += np.log(1.3 / obj.J)
    return obs, design, hyper, obj, theta


def call(kernel, obj, theta):
    p = obj.unpack(theta)
    h = obj.hyper
    return kernel.loglik_grad(obj.n, obj.X, obj.V, p.phi, np.ascontiguousarray(p.psi),
                              np.ascontiguousarray(p.alpha), p.sigma, p.gamma, h.phi_max,
                              h.tau, h.lambda_rate, obj.piecewise, h.kappa0)


@pytest.mark.parametrize("piecewise", [False, True])
@pytest.mark.parametrize("conjoiner", [False, True])
def test_python_kernel_matches_model(piecewise, conjoiner):
    obs, design, hyper, obj, theta = problem(3, piecewise, conjoiner)
    params = obj.unpack(theta)
    v = call(_kernels_py, obj, theta)[0]
    assert v == pytest.approx(penalized_loglik(obs, design, params, hyper), rel=1e-12)


@needs_ext
@given(st.integers(0, 10_000), st.booleans(), st.booleans())
@settings(max_examples=40, deadline=None)
def test_compiled_matches_python(seed, piecewise, conjoiner):
    *_, obj, theta = problem(seed, piecewise, conjoiner)
    a = call(_kernels_py, obj, theta)
    b = call(_kernels, obj, theta)
    assert b[0] == pytest.approx(a[0], rel=1e-12)
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_allclose(y, x, rtol=1e-10, atol=1e-10 * max(1.0, np.max(np.abs(x), initial=0.0)))


@pytest.mark.parametrize("piecewise", [False, True])
@pytest.mark.parametrize("conjoiner", [False, True])
def test_gradient_against_finite_differences(piecewise, conjoiner):
    *_, obj, theta = problem(7, piecewise, conjoiner)
    _, g = obj.value_grad(theta)
    fd = np.empty_like(theta)
    for k in range(theta.size):
        h = 1e-6
        e = np.zeros_like(theta)
        e[k] = h
        fd[k] = (obj.value_grad(theta + e)[0] - obj.value_grad(theta - e)[0]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))


def test_backend_selection_reported():
    assert _backend.BACKEND in ("cython", "python")
    if _kernels is not None and os.environ.get("FLUXCAL_PURE_PYTHON") != "1":
        assert _backend.BACKEND == "cython"


def test_pure_python_override():
    code = "import fluxcal; print(fluxcal.BACKEND)"
    env = {**os.environ, "FLUXCAL_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True)
    assert out.stdout.strip() == "python"


def test_pure_python_fit_matches(scenario1):
    obs, design, _, hyper, fit = scenario1
    from fluxcal.estimator import fit_mle
    saved = _backend.loglik_grad
    try:
        _backend.loglik_grad = _kernels_py.loglik_grad
        other = fit_mle(obs, design, hyper)
    finally:
        _backend.loglik_grad = saved
    np.testing.assert_allclose(other.beta, fit.beta, rtol=1e-6, atol=1e-9)


class TestOptimizer:
    def test_quadratic(self):
        A = np.diag([1e6, 1.0, 1e-4])
        c = np.array([1.0, -2.0, 3.0])

        def vg(x):
            d = x - c
            return -0.5 * d @ A @ d, -(A @ d)

        out = maximize(vg, np.zeros(3), gtol=1e-9)
        assert out.converged
        np.testing.assert_allclose(out.x, c, rtol=1e-6)

    def test_rosenbrock(self):
        def vg(x):
            a, b = x
            v = (1 - a) ** 2 + 100 * (b - a * a) ** 2
            g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
            return -v, -g

        out = maximize(vg, np.array([-1.2, 1.0]), gtol=1e-8)
        np.testing.assert_allclose(out.x, [1, 1], atol=1e-6)

    def test_nonfinite_start(self):
        with pytest.raises(FloatingPointError):
            maximize(lambda x: (np.nan, x), np.zeros(2))

    def test_fd_hessian(self):
        def vg(x):
            return -(x[0] ** 2 * x[1] + x[1] ** 3), -np.array([2 * x[0] * x[1],
                                                                x[0] ** 2 + 3 * x[1] ** 2])

        H = fd_hessian(vg, np.array([1.0, 2.0]))
        np.testing.assert_allclose(H, -np.array([[4, 2], [2, 12]]), rtol=1e-8)
