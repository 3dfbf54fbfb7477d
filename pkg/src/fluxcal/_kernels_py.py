"""Pure numpy implementation of the likelihood kernel.

Mirrors ``_kernels.pyx`` exactly; used when the compiled module is missing
or when ``FLUXCAL_PURE_PYTHON=1``.
"""

import numpy as np


def legendre_with_derivative(t, p):
    P = np.empty((t.size, p + 1))
    dP = np.empty((t.size, p + 1))
    P[:, 0] = 1.0
    dP[:, 0] = 0.0
    if p >= 1:
        P[:, 1] = t
        dP[:, 1] = 1.0
    for k in range(1, p):
        P[:, k + 1] = ((2 * k + 1) * t * P[:, k] - k * P[:, k - 1]) / (k + 1)
        dP[:, k + 1] = dP[:, k - 1] + (2 * k + 1) * P[:, k]
    return P, dP


def loglik_grad(n, X, V, phi, psi, alpha, sigma, gamma, phi_max, tau, lam,
                piecewise, kappa0):
    """Value and natural-parameter gradient of the penalized log-likelihood.

    ``X`` and ``V`` are indexed per observation.  Returns
    ``(value, d_phi, d_psi, d_alpha, d_sigma, d_gamma)``.
    """
    p = alpha.size - 1
    flux = X @ phi
    ap = V @ psi if V.shape[1] else None
    if ap is not None:
        flux = flux + phi[-1] * ap
    t = 2.0 * flux / phi_max - 1.0
    P, dP = legendre_with_derivative(t, p)
    r = n - P @ alpha
    if piecewise:
        knee = kappa0 * phi_max
        above = flux > knee
        g = np.where(above, flux, knee)
    else:
        g = np.ones_like(flux)
    inv_var = 1.0 / (sigma * g) ** 2
    w = r * inv_var
    rss_w = np.dot(r, w)
    value = -0.5 * rss_w - n.size * np.log(sigma)
    d_flux = w * (dP @ alpha) * (2.0 / phi_max)
    if piecewise:
        value -= np.sum(np.log(g))
        d_flux += np.where(above, r * w / g - 1.0 / g, 0.0)
    d_alpha = P.T @ w
    d_sigma = rss_w / sigma - n.size / sigma
    d_phi = X.T @ d_flux
    d_psi = np.zeros(psi.size)
    if ap is not None:
        d_phi[-1] += np.dot(ap, d_flux)
        d_psi = phi[-1] * (V.T @ d_flux)

    excess = phi.sum() - phi_max
    value -= 0.5 * excess ** 2 / tau ** 2
    d_phi -= excess / tau ** 2

    g2 = gamma * gamma
    slope_dev = alpha[1] - 0.5 * phi_max
    q = slope_dev ** 2 + np.dot(alpha[2:], alpha[2:])
    value += -0.5 * q / g2 - p * np.log(gamma) - lam * gamma
    d_alpha[1] -= slope_dev / g2
    d_alpha[2:] -= alpha[2:] / g2
    d_gamma = q / (g2 * gamma) - p / gamma - lam
    return value, d_phi, d_psi, d_alpha, d_sigma, d_gamma
