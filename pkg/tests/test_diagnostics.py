import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from slfv.diagnostics import (
    REPORT_COLUMNS,
    alpha_average,
    extract_fluctuations,
    fluctuation_from_values,
    k_alpha,
    k_alpha_constant,
    martingale_residual_check,
    qv_rate,
    qv_rate_pairwise,
    rho_r,
    sigma_alpha_delta,
    sigma_r,
    spde_variance_oracle,
    write_report_csv,
)
from slfv.errors import GridMismatchError
from slfv.events import RescaledTrajectory
from slfv.lattice import TorusGrid, ball_kernel, ball_volume, fit_grid
from slfv.scaling import ScalingParams
from slfv.solvers import (
    BackwardSolution,
    FunctionReaction,
    PdeSolution,
    solve_backward_testfn,
)

R = 1.0


@pytest.fixture(scope="module")
def g1():
    return fit_grid(1, 8.0, R, 8.5)


@pytest.fixture(scope="module")
def g2():
    return TorusGrid(2, 4.0, 18)


# --------------------------------------------------------------------------
# fixed-radius kernels


@pytest.mark.parametrize("w", [0.1, 0.5, 0.8])
def test_sigma_diagonal_on_constant(g1, w):
    q = np.full(g1.shape, w)
    V = ball_kernel(g1, R).volume
    assert sigma_r(g1, q, 30, 30, R) == pytest.approx(w * (1 - w) / V, rel=1e-12)


def test_sigma_vanishes_beyond_two_radii(g1):
    q = np.random.default_rng(0).random(g1.shape)
    cells = int(np.ceil(2 * R / g1.h))
    assert sigma_r(g1, q, 10, 10 + cells, R) == 0.0
    assert rho_r(g1, q, 10, 10 + cells, R) == 0.0


def test_sigma_vanishes_on_fixed_type(g1):
    zero = np.zeros(g1.shape)
    one = np.ones(g1.shape)
    assert sigma_r(g1, zero, 5, 9, R) == 0.0
    # Ball averages go through an FFT, so exact zeros become roundoff.
    assert sigma_r(g1, one, 5, 9, R) == pytest.approx(0.0, abs=1e-15)
    assert rho_r(g1, one, 5, 9, R) == pytest.approx(0.0, abs=1e-15)


def test_rho_at_one_half(g1):
    V = ball_kernel(g1, R).volume
    q = np.full(g1.shape, 0.5)
    assert rho_r(g1, q, 12, 12, R) == pytest.approx(1 / (8 * V), rel=1e-12)


@pytest.mark.parametrize("w", [0.2, 0.5, 0.9])
def test_rho_is_half_sigma_on_constant_diagonal(g1, w):
    q = np.full(g1.shape, w)
    assert rho_r(g1, q, 7, 7, R) == pytest.approx(0.5 * sigma_r(g1, q, 7, 7, R), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.integers(0, 67), b=st.integers(0, 67))
def test_sigma_symmetric_and_nonnegative(seed, a, b):
    g = fit_grid(1, 8.0, R, 8.5)
    q = np.random.default_rng(seed).random(g.shape)
    s_ab = sigma_r(g, q, a, b, R)
    assert s_ab == pytest.approx(sigma_r(g, q, b, a, R), abs=1e-15)
    assert sigma_r(g, q, a, a, R) >= 0


def _qv_constant_oracle(grid, w, phi, r, u):
    # One event at x: <q,phi> moves by u (1{offspring tracked} - w) sum_{B(x)} phi h^d.
    # Summing the second moment over event centers gives the rate below.
    centers = grid.centers()
    total = 0.0
    for idx in np.ndindex(grid.shape):
        x = np.array([centers[i] for i in idx])
        ball = grid.torus_distance_from(x) < r
        m = float(np.sum(phi[ball]) * grid.cell_volume)
        total += u * u * w * (1 - w) * m * m
    return total * grid.cell_volume


@pytest.mark.parametrize("dim", [1, 2])
def test_qv_rate_constant_field_oracle(g1, g2, dim):
    g = g1 if dim == 1 else g2
    phi = np.random.default_rng(3).random(g.shape)
    q = np.full(g.shape, 0.3)
    oracle = _qv_constant_oracle(g, 0.3, phi, R, 0.7)
    assert qv_rate(g, q, phi, R, 0.7) == pytest.approx(oracle, rel=1e-10)


@pytest.mark.parametrize("diploid", [False, True])
@pytest.mark.parametrize("dim", [1, 2])
def test_qv_rate_matches_pairwise(dim, diploid):
    g = TorusGrid(1, 6.0, 27) if dim == 1 else TorusGrid(2, 3.0, 8)
    rng = np.random.default_rng(dim + 10 * diploid)
    q = rng.random(g.shape)
    phi = rng.random(g.shape)
    fast = qv_rate(g, q, phi, R, 0.4, diploid=diploid)
    slow = qv_rate_pairwise(g, q, phi, R, 0.4, diploid=diploid)
    assert fast == pytest.approx(slow, rel=1e-10)


# --------------------------------------------------------------------------
# stable-regime kernels


def test_sigma_alpha_delta_zero_field(g1):
    assert sigma_alpha_delta(g1, np.zeros(g1.shape), 3, 6, 0.5, 0.2, 1.5) == 0.0


@pytest.mark.parametrize("sep", [0, 2, 5, 10])
def test_sigma_alpha_delta_bound(g1, sep):
    q = np.random.default_rng(sep).random(g1.shape)
    alpha, delta = 0.5, 0.3
    val = sigma_alpha_delta(g1, q, 20, 20 + sep, alpha, delta, 1.9)
    lo = max(delta, sep * g1.h / 2)
    assert 0 <= val <= lo**-alpha * ball_volume(1, 1.0) / alpha


@pytest.mark.parametrize("w", [0.25, 0.5])
def test_sigma_alpha_delta_diagonal_oracle(w):
    # On constants the diagonal integrand is w(1-w) V_r r^-(d+alpha+1) with exact discrete V_r.
    g = TorusGrid(1, 8.0, 400)
    alpha, delta, r_max = 0.5, 0.3, 1.5
    q = np.full(g.shape, w)

    def integrand(r):
        return w * (1 - w) * ball_kernel(g, r).volume * r ** -(2 + alpha)

    edges = [delta] + [(k + 0.5) * g.h for k in range(int(delta / g.h), int(r_max / g.h) + 1) if delta < (k + 0.5) * g.h < r_max]
    edges.append(r_max)
    oracle = sum(integrate.quad(integrand, a, b)[0] for a, b in zip(edges[:-1], edges[1:]))
    assert sigma_alpha_delta(g, q, 100, 100, alpha, delta, r_max, nodes_per_decade=400) == pytest.approx(oracle, rel=2e-3)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_k_alpha_homogeneity(d, alpha):
    assert k_alpha(d, 2.0, alpha) == pytest.approx(2.0**-alpha * k_alpha(d, 1.0, alpha), rel=1e-9)


def test_k_alpha_log_slope():
    s = np.geomspace(0.1, 10, 9)
    vals = k_alpha(2, s, 0.7)
    slope = np.polyfit(np.log(s), np.log(vals), 1)[0]
    assert slope == pytest.approx(-0.7, abs=1e-8)


def test_k_alpha_constant_1d():
    oracle, _ = integrate.quad(lambda r: (2 * r - 1) * r**-2.5, 0.5, np.inf)
    assert k_alpha_constant(1, 0.5) == pytest.approx(oracle, rel=1e-10)
    assert k_alpha_constant(1, 0.5) == pytest.approx(3.7712, abs=1e-4)


@pytest.mark.parametrize("bad", [0.0, 2.0])
def test_k_alpha_rejects_alpha(bad):
    with pytest.raises(ValueError):
        k_alpha(1, 1.0, bad)


def test_alpha_average_properties(g1):
    c = np.full(g1.shape, 0.42)
    assert alpha_average(g1, c, 10, 14, 0.5, 1.5) == pytest.approx(0.42, rel=1e-12)
    assert alpha_average(g1, np.zeros(g1.shape), 10, 14, 0.5, 1.5) == 0.0
    assert alpha_average(g1, np.ones(g1.shape), 10, 14, 0.5, 1.5) == pytest.approx(1.0, rel=1e-12)
    f = np.random.default_rng(1).random(g1.shape)
    v = alpha_average(g1, f, 10, 14, 0.5, 1.5)
    assert f.min() <= v <= f.max()
    with pytest.raises(ValueError):
        alpha_average(g1, f, 10, 10, 0.5, 1.5)


# --------------------------------------------------------------------------
# fluctuation fields


def _constant_solution(grid, w, times):
    times = np.asarray(times, dtype=float)
    return PdeSolution(grid, times, np.full((len(times), *grid.shape), w), 0.01, "constant")


def test_extract_fluctuations_zero_when_equal():
    g = TorusGrid(1, 4.0, 32)
    params = ScalingParams(0.01, 0.1, 1.0, 1.0, 1)
    times = [0.0, 0.5, 1.0]
    sol = _constant_solution(g, 0.3, times)
    traj = RescaledTrajectory(g, np.array(times), [np.full(g.shape, 0.3)] * 3, params)
    z = extract_fluctuations(traj, sol)
    assert np.all(z.values == 0)
    assert z.scale == pytest.approx(params.fluctuation_scale)


def test_extract_fluctuations_scales_difference():
    g = TorusGrid(1, 4.0, 32)
    params = ScalingParams(0.01, 0.1, 1.0, 1.0, 1)
    sol = _constant_solution(g, 0.3, [0.0, 1.0])
    traj = RescaledTrajectory(g, np.array([0.0, 1.0]), [np.full(g.shape, 0.3), np.full(g.shape, 0.5)], params)
    z = extract_fluctuations(traj, sol)
    np.testing.assert_allclose(z.values[1], 0.2 * params.fluctuation_scale, rtol=1e-12)
    np.testing.assert_allclose(z.pairing(np.ones(g.shape))[1], 0.2 * params.fluctuation_scale * g.L, rtol=1e-12)
    np.testing.assert_allclose(
        fluctuation_from_values(g, np.full(g.shape, 0.5), np.full(g.shape, 0.3), params), z.values[1], rtol=1e-12
    )


def test_extract_fluctuations_errors():
    g = TorusGrid(1, 4.0, 32)
    params = ScalingParams(0.01, 0.1, 1.0, 1.0, 1)
    traj = RescaledTrajectory(g, np.array([0.5]), [np.full(g.shape, 0.3)], params)
    with pytest.raises(GridMismatchError):
        extract_fluctuations(traj, _constant_solution(TorusGrid(1, 4.0, 16), 0.3, [0.5]))
    with pytest.raises(ValueError, match="not a node"):
        extract_fluctuations(traj, _constant_solution(g, 0.3, [0.0, 1.0]))


# --------------------------------------------------------------------------
# variance oracle

NO_REACTION = FunctionReaction(lambda w: np.zeros_like(w), lambda w: np.zeros_like(w))


def _heat_variance(u, sigma2, D, t):
    # (uV)^2 w(1-w) int_0^t ||G_{t-s} phi||^2 ds for a unit-mass Gaussian phi of variance sigma2, w = 1/2.
    V = ball_volume(1, 1.0)
    return (u * V) ** 2 * 0.25 * (np.sqrt(sigma2 + 2 * D * t) - np.sqrt(sigma2)) / (2 * D * np.sqrt(np.pi))


def _gaussian(grid, var):
    x = grid.centers() - grid.L / 2
    return np.exp(-x * x / (2 * var)) / np.sqrt(2 * np.pi * var)


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_variance_oracle_vanishes_on_fixed_type(w):
    g = TorusGrid(1, 10.0, 100)
    params = ScalingParams(1e-4, 0.1, 1.0, 1.0, 1)
    times = np.linspace(0, 1, 11)
    back = BackwardSolution(g, times, np.array([_gaussian(g, 1.0)] * 11), 1.0, "fixed")
    assert spde_variance_oracle(back, _constant_solution(g, w, times), params) == 0.0


def test_variance_oracle_on_analytic_heat_flow():
    g = TorusGrid(1, 30.0, 600)
    params = ScalingParams(1e-4, 0.1, 1.0, 1.0, 1)
    D, t, sigma2 = 2.0 / 3.0, 1.0, 0.5
    times = np.linspace(0, t, 401)
    values = np.array([_gaussian(g, sigma2 + 2 * D * (t - s)) for s in times])
    back = BackwardSolution(g, times, values, t, "analytic")
    got = spde_variance_oracle(back, _constant_solution(g, 0.5, times), params)
    assert got == pytest.approx(_heat_variance(1.0, sigma2, D, t), rel=1e-5)


def test_variance_oracle_with_solved_backward_flow():
    g = TorusGrid(1, 30.0, 300)
    params = ScalingParams(1e-4, 0.1, 1.0, 1.0, 1)
    D, sigma2 = 2.0 / 3.0, 0.5
    from slfv.lattice import TestFunction

    phi = TestFunction(g, _gaussian(g, sigma2))
    prev = 0.0
    for t in (0.25, 0.5, 1.0):
        times = np.linspace(0, t, 201)
        lim = _constant_solution(g, 0.5, times)
        back = solve_backward_testfn(phi, params, NO_REACTION, t, limit=lim).phi
        got = spde_variance_oracle(back, lim, params)
        assert got == pytest.approx(_heat_variance(1.0, sigma2, D, t), rel=5e-3)
        assert got > prev
        prev = got


def test_variance_oracle_requires_backward():
    g = TorusGrid(1, 4.0, 16)
    with pytest.raises(ValueError):
        spde_variance_oracle(None, _constant_solution(g, 0.5, [0.0]), ScalingParams(0.01, 0.1, 1, 1, 1))


# --------------------------------------------------------------------------
# martingale statistics


def test_martingale_check_on_frozen_paths():
    n, k = 200, 6
    times = np.linspace(0, 1, k)
    flat = np.full((n, k), 2.5)
    est = martingale_residual_check(times, flat, np.zeros((n, k)), np.zeros((n, k)))
    assert est.drift_estimate == 0.0 and est.qv_estimate == 0.0 and est.qv_oracle == 0.0
    assert est.drift_z == 0.0 and est.qv_z == 0.0


def test_martingale_check_subtracts_drift():
    rng = np.random.default_rng(5)
    n, times = 4000, np.linspace(0, 2, 21)
    noise = rng.normal(0, 0.3, n)
    pairings = np.outer(np.ones(n), 1.5 * times)
    pairings[:, -1] += noise
    drifts = np.full((n, len(times)), 1.5)
    est = martingale_residual_check(times, pairings, drifts, np.full((n, len(times)), 0.045))
    assert abs(est.drift_z) < 4
    assert est.qv_oracle == pytest.approx(0.09, rel=1e-12)
    assert abs(est.qv_z) < 4


def test_martingale_check_needs_replicates():
    with pytest.raises(ValueError, match="at least 100"):
        martingale_residual_check([0, 1], np.zeros((99, 2)), np.zeros((99, 2)), None)


def test_martingale_check_without_qv():
    est = martingale_residual_check([0, 1], np.zeros((100, 2)), np.zeros((100, 2)), None)
    assert np.isnan(est.qv_oracle)
    assert len(est.rows()) == 1


def test_report_csv_columns(tmp_path):
    n, times = 150, np.linspace(0, 1, 3)
    rng = np.random.default_rng(1)
    est = martingale_residual_check(times, rng.random((n, 3)), np.zeros((n, 3)), np.ones((n, 3)), phi_name="bump")
    path = write_report_csv(est.rows(), tmp_path / "m.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["drift", "quadratic_variation"]
    assert all(r[1] == "bump" for r in rows[1:])
