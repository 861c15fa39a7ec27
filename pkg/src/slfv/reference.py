"""Closed-form and quadrature references for a 1-d Gaussian test function.

``phi(x) = exp(-x^2 / (2 sigma^2))``. These are independent of the FFT
operators and serve as oracles for operator convergence tables.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy import integrate
from scipy.special import ndtr

_SQRT2PI = np.sqrt(2 * np.pi)

#: Below this radius the double-average defect uses its Taylor series.
TAYLOR_RADIUS = 0.02


def gaussian(x, sigma: float = 1.0):
    return np.exp(-np.asarray(x, dtype=float) ** 2 / (2 * sigma**2))


def gaussian_d2(x, sigma: float = 1.0):
    x = np.asarray(x, dtype=float)
    return (x**2 / sigma**4 - 1 / sigma**2) * gaussian(x, sigma)


def _gaussian_d4(x, sigma: float):
    u = np.asarray(x, dtype=float) / sigma
    return (u**4 - 6 * u**2 + 3) / sigma**4 * gaussian(x, sigma)


def _gaussian_d6(x, sigma: float):
    u = np.asarray(x, dtype=float) / sigma
    return (u**6 - 15 * u**4 + 45 * u**2 - 15) / sigma**6 * gaussian(x, sigma)


def _second_antiderivative(y, sigma: float):
    u = np.asarray(y, dtype=float) / sigma
    return _SQRT2PI * sigma * sigma * (u * ndtr(u) + np.exp(-u * u / 2) / _SQRT2PI)


def double_average_defect(x, r: float, sigma: float = 1.0):
    """``<<phi>>(x, r) - phi(x)`` for continuum balls in d = 1.

    The double average is the triangle-kernel mean on ``|y| < 2r``, i.e. a
    second difference of the second antiderivative of ``phi``. Small radii
    use the series ``r^2/3 phi'' + 2 r^4/45 phi'''' + r^6/315 phi^(6)``.
    """
    x = np.asarray(x, dtype=float)
    if r < TAYLOR_RADIUS:
        return r * r / 3 * gaussian_d2(x, sigma) + 2 * r**4 / 45 * _gaussian_d4(x, sigma) + r**6 / 315 * _gaussian_d6(x, sigma)
    G = _second_antiderivative
    return (G(x + 2 * r, sigma) - 2 * G(x, sigma) + G(x - 2 * r, sigma)) / (4 * r * r) - gaussian(x, sigma)


def gaussian_L_r(x, r: float, sigma: float = 1.0):
    """``(3 / r^2) (<<phi>> - phi)``, the continuum ``L^(r)`` in d = 1."""
    return 3 / (r * r) * double_average_defect(x, r, sigma)


def gaussian_D_alpha(x: float, alpha: float, r_max: float, sigma: float = 1.0, delta: float = 0.0) -> float:
    """``V_1 int_delta^r_max (<<phi>> - phi)(x, r) r^-(alpha+1) dr`` by adaptive quadrature (d = 1)."""

    def integrand(r):
        return float(double_average_defect(x, r, sigma)) * r ** (-alpha - 1)

    pts = [p for p in (TAYLOR_RADIUS, 0.1, 1.0, 3.0) if delta < p < r_max]
    val, _ = integrate.quad(integrand, delta, r_max, limit=400, epsabs=1e-12, epsrel=1e-10, points=pts or None)
    return 2.0 * val


def gaussian_D_alpha_values(xs, alpha: float, r_max: float, sigma: float = 1.0, delta: float = 0.0) -> NDArray[np.float64]:
    return np.array([gaussian_D_alpha(float(x), alpha, r_max, sigma, delta) for x in np.atleast_1d(xs)])
