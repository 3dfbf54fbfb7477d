# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood kernel; same contract as ``_kernels_py.loglik_grad``."""

import numpy as np
from libc.math cimport log


def loglik_grad(const double[::1] n, const double[:, ::1] X, const double[:, ::1] V,
                const double[::1] phi, const double[::1] psi, const double[::1] alpha,
                double sigma, double gamma, double phi_max, double tau, double lam,
                bint piecewise, double kappa0):
    cdef Py_ssize_t N = n.shape[0], J = X.shape[1], Nv = V.shape[1]
    cdef Py_ssize_t p = alpha.shape[0] - 1
    cdef Py_ssize_t i, j, k
    cdef double knee = kappa0 * phi_max, two_over = 2.0 / phi_max
    cdef double flux, ap, t, mu, dmu, pk, pkm1, pkp1, dk, dkm1, dkp1
    cdef double r, g, inv_var, w, df, rss_w = 0.0, sum_log_g = 0.0
    cdef double phi_last = phi[J - 1] if J > 0 else 0.0

    d_phi_arr = np.zeros(J)
    d_psi_arr = np.zeros(Nv)
    d_alpha_arr = np.zeros(p + 1)
    cdef double[::1] d_phi = d_phi_arr
    cdef double[::1] d_psi = d_psi_arr
    cdef double[::1] d_alpha = d_alpha_arr
    cdef double[::1] P = np.empty(p + 1)

    for i in range(N):
        flux = 0.0
        for j in range(J):
            if X[i, j] != 0.0:
                flux += X[i, j] * phi[j]
        ap = 0.0
        for k in range(Nv):
            if V[i, k] != 0.0:
                ap += V[i, k] * psi[k]
        flux += phi_last * ap
        t = two_over * flux - 1.0

        # Legendre values and derivatives by recurrence
        P[0] = 1.0
        mu = alpha[0]
        dmu = 0.0
        if p >= 1:
            P[1] = t
            mu += alpha[1] * t
            dmu += alpha[1]
            pkm1 = 1.0
            pk = t
            dkm1 = 0.0
            dk = 1.0
            for k in range(1, p):
                pkp1 = ((2 * k + 1) * t * pk - k * pkm1) / (k + 1)
                dkp1 = dkm1 + (2 * k + 1) * pk
                P[k + 1] = pkp1
                mu += alpha[k + 1] * pkp1
                dmu += alpha[k + 1] * dkp1
                pkm1 = pk
                pk = pkp1
                dkm1 = dk
                dk = dkp1

        r = n[i] - mu
        if piecewise and flux > knee:
            g = flux
        elif piecewise:
            g = knee
        else:
            g = 1.0
        inv_var = 1.0 / (sigma * sigma * g * g)
        w = r * inv_var
        rss_w += r * w
        if piecewise:
            sum_log_g += log(g)

        df = w * dmu * two_over
        if piecewise and flux > knee:
            df += r * w / g - 1.0 / g
        for k in range(p + 1):
            d_alpha[k] += P[k] * w
        for j in range(J):
            if X[i, j] != 0.0:
                d_phi[j] += X[i, j] * df
        if Nv > 0:
            d_phi[J - 1] += ap * df
            for k in range(Nv):
                if V[i, k] != 0.0:
                    d_psi[k] += phi_last * V[i, k] * df

    cdef double value = -0.5 * rss_w - N * log(sigma) - sum_log_g
    cdef double d_sigma = rss_w / sigma - N / sigma

    cdef double excess = -phi_max
    for j in range(J):
        excess += phi[j]
    value -= 0.5 * excess * excess / (tau * tau)
    for j in range(J):
        d_phi[j] -= excess / (tau * tau)

    cdef double g2 = gamma * gamma
    cdef double slope_dev = alpha[1] - 0.5 * phi_max
    cdef double q = slope_dev * slope_dev
    for k in range(2, p + 1):
        q += alpha[k] * alpha[k]
        d_alpha[k] -= alpha[k] / g2
    d_alpha[1] -= slope_dev / g2
    value += -0.5 * q / g2 - p * log(gamma) - lam * gamma
    cdef double d_gamma = q / (g2 * gamma) - p / gamma - lam
    return value, d_phi_arr, d_psi_arr, d_alpha_arr, d_sigma, d_gamma
