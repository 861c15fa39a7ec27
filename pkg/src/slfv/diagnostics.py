"""Martingale kernels, noise covariances, fluctuation fields and variance oracles.

Kernels evaluated "by cell quadrature" integrate over event centers ``x``
placed at cell centers with weight ``h^d``; balls use the cell-center rule
and ``V_r`` denotes the discrete ball volume ``h^d * count``, so that
diagonal identities hold exactly on the grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import integrate

from .errors import GridMismatchError, ResolutionError
from .events import RescaledTrajectory, expected_ball_volume
from .lattice import (
    FrequencyField,
    TestFunction,
    TorusGrid,
    ball_average_values,
    ball_kernel,
    ball_overlap_volume,
    ball_volume,
)
from .models import EventLaw, FixedRadius, GeneralF, Overdominance
from .scaling import Regime, ScalingParams
from .solvers import BackwardSolution, PdeSolution

#: Replicates required before a martingale estimate is reported.
MIN_REPLICATES = 100


def _vals(x) -> NDArray[np.float64]:
    if isinstance(x, (FrequencyField, TestFunction)):
        return x.values
    return np.asarray(x, dtype=float)


def _cell_center(grid: TorusGrid, z) -> NDArray[np.float64]:
    z = np.broadcast_to(np.asarray(z, dtype=int), (grid.d,))
    return (z + 0.5) * grid.h


def _torus_sep(grid: TorusGrid, z1, z2) -> float:
    diff = np.abs(_cell_center(grid, z1) - _cell_center(grid, z2)) % grid.L
    diff = np.minimum(diff, grid.L - diff)
    return float(np.sqrt(np.sum(diff**2)))


def _lens_mask(grid: TorusGrid, z1, z2, r: float) -> NDArray[np.bool_]:
    """Cells ``x`` with both ``z1`` and ``z2`` in the cell-center ball ``B(x, r)``."""
    return (grid.torus_distance_from(_cell_center(grid, z1)) < r) & (grid.torus_distance_from(_cell_center(grid, z2)) < r)


def _q_at(grid: TorusGrid, q: NDArray[np.float64], z) -> float:
    return float(q[tuple(np.broadcast_to(np.asarray(z, dtype=int), (grid.d,)))])


# --------------------------------------------------------------------------
# fixed-radius kernels


def sigma_r(grid: TorusGrid, q, z1, z2, r: float) -> float:
    """Haploid drift kernel ``sigma^(r)_{z1,z2}(q)`` by cell quadrature over event centers."""
    q = _vals(q)
    if q.shape != grid.shape:
        raise GridMismatchError("field does not match the grid")
    k = ball_kernel(grid, r)
    mask = _lens_mask(grid, z1, z2, r)
    if not mask.any():
        return 0.0
    p = ball_average_values(grid, q, r)[mask]
    q1, q2 = _q_at(grid, q, z1), _q_at(grid, q, z2)
    integrand = p * (1 - q1) * (1 - q2) + (1 - p) * q1 * q2
    return float(np.sum(integrand) * grid.cell_volume / k.volume**2)


def rho_r(grid: TorusGrid, q, z1, z2, r: float) -> float:
    """Diploid drift kernel: offspring genotype 0, 1/2 or 1 with probabilities ``(1-p)^2, 2p(1-p), p^2``."""
    q = _vals(q)
    if q.shape != grid.shape:
        raise GridMismatchError("field does not match the grid")
    k = ball_kernel(grid, r)
    mask = _lens_mask(grid, z1, z2, r)
    if not mask.any():
        return 0.0
    p = ball_average_values(grid, q, r)[mask]
    q1, q2 = _q_at(grid, q, z1), _q_at(grid, q, z2)
    integrand = (1 - p) ** 2 * q1 * q2 + 2 * p * (1 - p) * (0.5 - q1) * (0.5 - q2) + p * p * (1 - q1) * (1 - q2)
    return float(np.sum(integrand) * grid.cell_volume / k.volume**2)


def qv_rate(grid: TorusGrid, q, phi, r: float, u: float, diploid: bool = False) -> float:
    """``u^2 V_r^2 sum_{z1,z2} h^2d phi(z1) phi(z2) kernel_{z1,z2}(q)`` in raw time.

    Expanding the kernel turns the double sum into ball sums around each
    event center, so the cost is a few convolutions instead of ``n^2d``
    kernel evaluations. ``diploid`` selects ``rho`` instead of ``sigma``.
    """
    q = _vals(q)
    phi = _vals(phi)
    V = ball_kernel(grid, r).volume
    p = ball_average_values(grid, q, r)
    A = V * ball_average_values(grid, phi * (1 - q), r)  # sum phi (1 - q) h^d over the ball
    B = V * ball_average_values(grid, phi * q, r)
    if diploid:
        C = V * ball_average_values(grid, phi * (0.5 - q), r)
        dens = (1 - p) ** 2 * B**2 + 2 * p * (1 - p) * C**2 + p * p * A**2
    else:
        dens = p * A**2 + (1 - p) * B**2
    return float(u * u * np.sum(dens) * grid.cell_volume)


def qv_rate_pairwise(grid: TorusGrid, q, phi, r: float, u: float, diploid: bool = False) -> float:
    """Same quantity as :func:`qv_rate` by explicit pair sums of the kernel (small grids only)."""
    q = _vals(q)
    phi = _vals(phi)
    V = ball_kernel(grid, r).volume
    kern = rho_r if diploid else sigma_r
    idx = list(np.ndindex(grid.shape))
    hd = grid.cell_volume
    total = 0.0
    for z1 in idx:
        if phi[z1] == 0:
            continue
        for z2 in idx:
            if phi[z2] == 0 or _torus_sep(grid, z1, z2) >= 2 * r:
                continue
            total += phi[z1] * phi[z2] * kern(grid, q, z1, z2, r)
    return float(u * u * V * V * hd * hd * total)


def generator_drift(grid: TorusGrid, q, phi, law: EventLaw, model: GeneralF | Overdominance, n_radii: int = 48) -> float:
    """``d/dt E<q, phi>`` under the event dynamics, in raw time, by cell quadrature.

    For an event at ``x`` the offspring is of the tracked type with mean
    ``m = <q> - s F(<q>)`` (``<q>`` over the ball), so the pairing moves by
    ``u V (m <phi> - <phi q>)`` on average. Stable radii are integrated with
    Gauss-Legendre nodes in ``log r``.
    """
    q = _vals(q)
    phi = _vals(phi)
    s = law.total_selection(model)

    def rate(r: float) -> float:
        V = ball_kernel(grid, r).volume
        p = ball_average_values(grid, q, r)
        m = p - s * np.asarray(model.F(p), dtype=float)
        val = m * ball_average_values(grid, phi, r) - ball_average_values(grid, phi * q, r)
        return float(law.u * V * np.sum(val) * grid.cell_volume)

    rad = law.radius
    if isinstance(rad, FixedRadius):
        return rate(rad.R)
    b = grid.d + rad.alpha
    x, w = np.polynomial.legendre.leggauss(n_radii)
    lo, hi = 0.0, np.log(rad.r_max)
    t = 0.5 * (hi - lo) * (x + 1) + lo
    total = 0.0
    for ti, wi in zip(t, w):
        r = float(np.exp(ti))
        total += wi * 0.5 * (hi - lo) * r ** (-b) * rate(r)
    return total


def one_event_mean_increment_constant(grid: TorusGrid, w: float, phi, law: EventLaw, model) -> float:
    """Exact mean change of ``<q, phi>`` over one event started from ``q == w``.

    Centers are uniform on the torus, so a cell is covered with probability
    ``V_r / L^d`` (continuum volume), and the offspring mean is
    ``w - s F(w)``.
    """
    phi = _vals(phi)
    s = law.total_selection(model)
    mass = float(np.sum(phi) * grid.cell_volume)
    return float(-law.u * s * model.F(w) * mass * expected_ball_volume(law, grid.d) / grid.L**grid.d)


# --------------------------------------------------------------------------
# stable-regime kernels


def _log_trapezoid(lo: float, hi: float, nodes_per_decade: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Nodes and weights for ``int_lo^hi g(r) dr`` by the trapezoid rule in ``log r``."""
    n = max(3, int(np.ceil(nodes_per_decade * np.log10(hi / lo))) + 1)
    t = np.linspace(np.log(lo), np.log(hi), n)
    w = np.full(n, t[1] - t[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    r = np.exp(t)
    return r, w * r


def sigma_alpha_delta(
    grid: TorusGrid, q, z1, z2, alpha: float, delta: float, r_max: float, nodes_per_decade: int = 32
) -> float:
    """``int_{max(delta, |z1-z2|/2)}^{r_max} V_r^2 sigma^(r)_{z1,z2}(q) r^-(d+alpha+1) dr``."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    if delta < grid.h:
        raise ResolutionError("delta is below the cell width")
    lo = max(delta, 0.5 * _torus_sep(grid, z1, z2))
    if lo >= r_max:
        return 0.0
    q = _vals(q)
    r, w = _log_trapezoid(lo, r_max, nodes_per_decade)
    total = 0.0
    for ri, wi in zip(r, w):
        if ri < grid.h:
            continue
        V = ball_kernel(grid, float(ri)).volume
        total += wi * V * V * sigma_r(grid, q, z1, z2, float(ri)) * ri ** -(grid.d + alpha + 1)
    return float(total)


def k_alpha(d: int, separation, alpha: float) -> NDArray[np.float64] | float:
    """``K_alpha = int_{s/2}^inf V_r(z1, z2) r^-(d+alpha+1) dr`` at separation ``s``.

    Each separation is integrated on its own (no use of the homogeneity).
    Converges for ``0 < alpha < 2``, a wider range than the regime's
    ``(0, min(2, d))``.
    """
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    s = np.atleast_1d(np.asarray(separation, dtype=float))
    if np.any(s <= 0):
        raise ValueError("k_alpha is singular at coincident points")
    out = np.empty_like(s)
    for i, si in enumerate(s):
        def integrand(r, si=si):
            return ball_overlap_volume(d, r, si) * r ** -(d + alpha + 1)

        head, _ = integrate.quad(integrand, si / 2, 4 * si, limit=200, epsabs=0, epsrel=1e-12)
        tail, _ = integrate.quad(integrand, 4 * si, np.inf, limit=200, epsabs=0, epsrel=1e-12)
        out[i] = head + tail
    return float(out[0]) if np.ndim(separation) == 0 else out


def k_alpha_constant(d: int, alpha: float) -> float:
    """``C_{d,alpha}``: the value of :func:`k_alpha` at unit separation."""
    return float(k_alpha(d, 1.0, alpha))


def alpha_average(
    grid: TorusGrid, f, z1, z2, alpha: float, r_max: float, nodes_per_decade: int = 32
) -> float:
    """``[f]_alpha(z1, z2)``: mean offspring type over events covering both points.

    Ratio of ``int r^-(d+alpha+1) int_{lens} <f>(x, r) dx dr`` to
    ``int r^-(d+alpha+1) V_r(z1, z2) dr`` with shared radial nodes and cell
    quadrature, so the result is a convex combination of ball averages.
    """
    sep = _torus_sep(grid, z1, z2)
    if sep == 0:
        raise ValueError("alpha_average needs distinct points")
    f = _vals(f)
    lo = max(sep / 2, grid.h)
    if lo >= r_max:
        raise ResolutionError("no radius in (|z1-z2|/2, r_max) covers both points")
    r, w = _log_trapezoid(lo, r_max, nodes_per_decade)
    num = den = 0.0
    for ri, wi in zip(r, w):
        mask = _lens_mask(grid, z1, z2, float(ri))
        if not mask.any():
            continue
        avg = ball_average_values(grid, f, float(ri))
        weight = wi * ri ** -(grid.d + alpha + 1) * grid.cell_volume
        num += weight * float(np.sum(avg[mask]))
        den += weight * float(mask.sum())
    if den == 0:
        raise ResolutionError("no cell-center ball covers both points")
    return num / den


# --------------------------------------------------------------------------
# fluctuation fields and variance oracles


@dataclass(frozen=True)
class FluctuationField:
    """``Z^N = scale * (q~^N - f^N)`` at matching times."""

    grid: TorusGrid
    times: NDArray[np.float64]
    values: NDArray[np.float64]
    scale: float

    def pairing(self, phi) -> NDArray[np.float64]:
        p = _vals(phi)
        axes = tuple(range(1, self.values.ndim))
        return np.sum(self.values * p, axis=axes) * self.grid.cell_volume


def _same_grid(a: TorusGrid, b: TorusGrid) -> bool:
    return a.d == b.d and a.n == b.n and abs(a.L - b.L) <= 1e-9 * max(a.L, b.L)


def extract_fluctuations(traj: RescaledTrajectory, centering: PdeSolution) -> FluctuationField:
    """Fluctuation field of a rescaled trajectory around its centering term."""
    if not _same_grid(traj.grid, centering.grid):
        raise GridMismatchError("trajectory and centering live on different grids")
    if not traj.snapshots:
        raise ValueError("trajectory holds no snapshots")
    scale = traj.scaling.fluctuation_scale
    vals = []
    for t, snap in zip(traj.times, traj.snapshots):
        try:
            f = centering.at(float(t))
        except ValueError as exc:
            raise ValueError(f"trajectory time {t} is not a node of the centering solution") from exc
        vals.append(scale * (np.asarray(snap) - f))
    return FluctuationField(centering.grid, np.asarray(traj.times, dtype=float), np.array(vals), scale)


def fluctuation_from_values(grid: TorusGrid, q, f, scaling: ScalingParams) -> NDArray[np.float64]:
    """``Z^N`` at one time from field values and centering values."""
    return scaling.fluctuation_scale * (_vals(q) - _vals(f))


def _time_trapezoid(times: NDArray[np.float64], vals: NDArray[np.float64]) -> float:
    return float(np.trapezoid(vals, times)) if hasattr(np, "trapezoid") else float(np.trapz(vals, times))


def spde_variance_oracle_brownian(backward: BackwardSolution, f: PdeSolution, params: ScalingParams) -> float:
    """``(u V_R)^2 int_0^t int phi(x,s,t)^2 f_s(1-f_s) dx ds``, trapezoid in ``s``."""
    if not _same_grid(backward.grid, f.grid):
        raise GridMismatchError("backward solution and centering live on different grids")
    uv = params.u * ball_volume(backward.grid.d, params.R)
    integrand = []
    for s, phi_s in zip(backward.times, backward.values):
        fs = f.at(float(s))
        integrand.append(float(np.sum(phi_s**2 * fs * (1 - fs)) * backward.grid.cell_volume))
    return uv * uv * _time_trapezoid(backward.times, np.array(integrand))


def cell_self_average_1d(h: float, alpha: float) -> float:
    """Mean of ``|z1 - z2|^-alpha`` over two points uniform in one cell of width ``h``."""
    if not 0 < alpha < 1:
        raise ValueError("the cell self-average is finite only for 0 < alpha < 1")
    return 2 * h**-alpha / ((1 - alpha) * (2 - alpha))


def stable_covariance_band(
    grid: TorusGrid, f, alpha: float, r_max: float, nodes_per_decade: int = 24
) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Noise covariance ``K([f](1 - f1 - f2) + f1 f2)`` for every cell and offset (d = 1).

    Returns offsets ``k`` (cells, ``|k| h < 2 r_max``) and an array ``cov[k, z]``
    for the pair ``(z, z + k)``. ``K [f]_alpha`` is integrated directly as
    ``int r^-(alpha+2) int_{lens} <f> dx dr`` up to ``r_max``; beyond it the
    lens average is held at its ``r_max`` value. The diagonal uses the cell
    self-average of ``|z1 - z2|^-alpha`` with ``[f]_alpha -> f``.
    """
    if grid.d != 1:
        raise NotImplementedError("the banded stable covariance is implemented for d = 1")
    f = _vals(f)
    n, h = grid.n, grid.h
    kmax = int(np.ceil(2 * r_max / h))
    offsets = np.arange(-kmax, kmax + 1)
    cov = np.zeros((len(offsets), n))
    C = k_alpha_constant(1, alpha)
    beta = alpha + 2.0
    for j, k in enumerate(offsets):
        if k == 0:
            cov[j] = C * cell_self_average_1d(h, alpha) * f * (1 - f)
            continue
        sep = abs(k) * h
        lo = sep / 2
        if lo >= r_max:
            continue
        r, w = _log_trapezoid(lo, r_max, nodes_per_decade)
        num = np.zeros(n)
        last = None
        for ri, wi in zip(r, w):
            if ri < 0.5 * h:
                continue
            avg = ball_average_values(grid, f, float(ri))
            # lens of B(x, r) containing both z and z+k: x - z in (k h - r, r) for k > 0
            lo_c, hi_c = (max(k, 0) * h - ri, min(k, 0) * h + ri)
            members = [m for m in range(-int(ri / h) - abs(k) - 1, int(ri / h) + abs(k) + 2) if lo_c < m * h < hi_c]
            if not members:
                continue
            lens = np.zeros(n)
            for m in members:
                lens += np.roll(avg, -m)
            lens *= h
            num += wi * ri**-beta * lens
            last = lens
        K = C * sep**-alpha
        if last is not None:
            # frozen lens integrand beyond r_max: int_{r_max}^inf r^-beta (2r - sep) dr / (2 r_max - sep)
            tail_w = (2 * r_max**-alpha / alpha - sep * r_max**-(1 + alpha) / (1 + alpha)) / max(2 * r_max - sep, h)
            num += tail_w * last
        f2 = np.roll(f, -k)
        cov[j] = num * (1 - f - f2) + K * f * f2
    return offsets, cov


def spde_variance_oracle_stable(
    backward: BackwardSolution, f: PdeSolution, params: ScalingParams, r_max: float, nodes_per_decade: int = 24
) -> float:
    """``u^2 int_0^t sum_{z1,z2} phi phi cov(z1, z2; f_s) h^2 ds`` over the band, d = 1."""
    grid = backward.grid
    if not _same_grid(grid, f.grid):
        raise GridMismatchError("backward solution and centering live on different grids")
    integrand = []
    for s, phi_s in zip(backward.times, backward.values):
        offsets, cov = stable_covariance_band(grid, f.at(float(s)), params.alpha, r_max, nodes_per_decade)
        tot = 0.0
        for j, k in enumerate(offsets):
            tot += float(np.sum(phi_s * np.roll(phi_s, -k) * cov[j]))
        integrand.append(tot * grid.h * grid.h)
    return params.u**2 * _time_trapezoid(backward.times, np.array(integrand))


def spde_variance_oracle(
    backward: BackwardSolution, f: PdeSolution, params: ScalingParams, r_max: float | None = None
) -> float:
    """Variance of ``<z_t, phi>`` for the limiting linear SPDE of either regime."""
    if backward is None:
        raise ValueError("a backward test-function solution is required")
    if params.regime is Regime.BROWNIAN:
        return spde_variance_oracle_brownian(backward, f, params)
    return spde_variance_oracle_stable(backward, f, params, r_max if r_max is not None else backward.grid.L / 4 * 0.999)


# --------------------------------------------------------------------------
# martingale checks


@dataclass(frozen=True)
class MartingaleEstimate:
    """Compensated-increment statistics of ``<q, phi>`` over ``[0, T]``.

    ``drift_*`` compare the mean compensated increment with 0;
    ``qv_*`` compare its variance with the mean integrated quadratic
    variation predicted by the kernels on the realized fields.
    """

    phi_name: str
    T: float
    replicates: int
    drift_estimate: float
    drift_se: float
    drift_z: float
    qv_estimate: float
    qv_se: float
    qv_oracle: float
    qv_z: float
    normalization: float = 1.0

    def qv_within(self, rel_allowance: float = 0.05, n_se: float = 3.0) -> bool:
        return abs(self.qv_estimate - self.qv_oracle) <= n_se * self.qv_se + rel_allowance * abs(self.qv_oracle)

    def rows(self) -> list[dict]:
        out = [{"statistic": "drift", "phi": self.phi_name, "t": self.T, "estimate": self.drift_estimate,
                "oracle": 0.0, "se": self.drift_se, "z": self.drift_z}]
        if not np.isnan(self.qv_oracle):
            out.append({"statistic": "quadratic_variation", "phi": self.phi_name, "t": self.T,
                        "estimate": self.qv_estimate, "oracle": self.qv_oracle, "se": self.qv_se, "z": self.qv_z})
        return out


def martingale_observers(grid: TorusGrid, phi, law: EventLaw, model: GeneralF | Overdominance) -> dict:
    """Observers recording ``<q, phi>``, the generator drift and the QV rate at each sample time."""
    phi_v = _vals(phi)
    if not isinstance(law.radius, FixedRadius):
        qv_fn = None
    else:
        R = law.radius.R

        def qv_fn(t, q):
            return qv_rate(grid, q, phi_v, R, law.u, diploid=not model.haploid)

    obs = {
        "pairing": lambda t, q: float(np.sum(q * phi_v) * grid.cell_volume),
        "drift": lambda t, q: generator_drift(grid, q, phi_v, law, model),
    }
    if qv_fn is not None:
        obs["qv"] = qv_fn
    return obs


def martingale_residual_check(
    times: Sequence[float],
    pairings: NDArray[np.float64],
    drifts: NDArray[np.float64],
    qv_rates: NDArray[np.float64] | None,
    phi_name: str = "phi",
    normalization: float = 1.0,
) -> MartingaleEstimate:
    """Statistics of ``M_T = <q_T,phi> - <q_0,phi> - int_0^T drift dt`` across replicates.

    Arrays have shape ``(replicates, len(times))``. Time integrals of the
    realized drift and QV rate use the trapezoid rule over ``times``.
    Without ``qv_rates`` only the drift statistics are filled (QV fields NaN).
    ``normalization`` multiplies the pairing before squaring (e.g. a
    fluctuation scale) and is applied to both sides.
    """
    pairings = np.asarray(pairings, dtype=float)
    n = pairings.shape[0]
    if n < MIN_REPLICATES:
        raise ValueError(f"need at least {MIN_REPLICATES} replicates, got {n}")
    t = np.asarray(times, dtype=float)
    comp = np.array([_time_trapezoid(t, row) for row in np.asarray(drifts, dtype=float)])
    M = normalization * (pairings[:, -1] - pairings[:, 0] - comp)
    mean = float(M.mean())
    se = float(M.std(ddof=1) / np.sqrt(n))
    dz = mean / se if se > 0 else 0.0
    c = M - mean
    var = float(np.sum(c * c) / (n - 1))
    m4 = float(np.mean(c**4))
    var_se = float(np.sqrt(max(m4 - var * var, 0.0) / n))
    if qv_rates is None:
        oracle = qz = float("nan")
    else:
        qv = np.array([_time_trapezoid(t, row) for row in np.asarray(qv_rates, dtype=float)])
        oracle = float(normalization**2 * qv.mean())
        qz = (var - oracle) / var_se if var_se > 0 else 0.0
    return MartingaleEstimate(phi_name, float(t[-1] - t[0]), n, mean, se, dz, var, var_se, oracle, qz, normalization)


# --------------------------------------------------------------------------
# report


REPORT_COLUMNS = ("statistic", "phi", "t", "estimate", "oracle", "se", "z")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_report_csv(rows: Iterable[dict], path: str | Path) -> Path:
    """Write diagnostics rows with columns ``statistic, phi, t, estimate, oracle, se, z``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return path
