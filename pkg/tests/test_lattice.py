import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slfv.errors import GridMismatchError, ResolutionError
from slfv.lattice import (
    FrequencyField,
    TestFunction,
    TorusGrid,
    XiMetricFamily,
    ball_average,
    ball_kernel,
    ball_overlap_volume,
    ball_overlap_volume_array,
    ball_volume,
    double_ball_average,
    fit_grid,
    pair,
    read_snapshot,
    write_snapshot,
    xi_distance,
)


@pytest.mark.parametrize(
    "d, r, expected",
    [(1, 1.0, 2.0), (2, 1.0, np.pi), (3, 2.0, 32 * np.pi / 3)],
)
def test_ball_volume(d, r, expected):
    assert ball_volume(d, r) == pytest.approx(expected, rel=1e-14)


def test_ball_volume_rejects_dimension():
    with pytest.raises(ValueError):
        ball_volume(4, 1.0)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_overlap_at_zero_distance_is_ball_volume(d):
    assert ball_overlap_volume(d, 1.3, 0.0) == pytest.approx(ball_volume(d, 1.3), rel=1e-14)


def test_overlap_1d_is_two_r_minus_dist():
    assert ball_overlap_volume(1, 1.0, 1.0) == 1.0


def _overlap_monte_carlo_2d(dist, n, seed):
    # Uniform points in the bounding box of the first disc; count those in both.
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n // 10**6):
        p = rng.uniform(-1.0, 1.0, size=(10**6, 2))
        in1 = p[:, 0] ** 2 + p[:, 1] ** 2 < 1
        in2 = (p[:, 0] - dist) ** 2 + p[:, 1] ** 2 < 1
        hits += np.count_nonzero(in1 & in2)
    frac = hits / n
    return 4 * frac, 4 * np.sqrt(frac * (1 - frac) / n)


def test_overlap_2d_matches_monte_carlo():
    mc, se = _overlap_monte_carlo_2d(1.0, 10**7, seed=1)
    exact = ball_overlap_volume(2, 1.0, 1.0)
    assert exact == pytest.approx(2 * np.arccos(0.5) - 0.5 * np.sqrt(3), rel=1e-14)
    assert exact == pytest.approx(1.22837, abs=1e-5)
    assert abs(mc - exact) < 3 * se


@pytest.mark.parametrize("d", [1, 2, 3])
def test_overlap_nonincreasing_and_vanishing(d):
    dist = np.linspace(0, 3, 301)
    v = ball_overlap_volume_array(d, 1.0, dist)
    assert np.all(np.diff(v) <= 1e-15)
    assert np.all(v[dist >= 2] == 0)


def test_fit_grid_half_integer_ball_is_exact_in_1d():
    g = fit_grid(1, 20.0, 1.0, 8.5)
    k = ball_kernel(g, 1.0)
    assert k.count == 17
    assert k.volume == pytest.approx(2.0, rel=1e-14)


def test_fit_grid_rejects_coarse_resolution():
    with pytest.raises(ResolutionError):
        fit_grid(1, 10.0, 1.0, 4.0)


def test_ball_kernel_rejects_subcell_radius():
    g = TorusGrid(1, 10.0, 10)
    with pytest.raises(ResolutionError):
        ball_kernel(g, 0.5)


@pytest.mark.parametrize("d", [1, 2])
def test_average_fixes_constants(d):
    g = fit_grid(d, 6.0, 1.0, 8.5)
    q = FrequencyField.constant(g, 0.37)
    np.testing.assert_allclose(ball_average(q, 1.0).values, 0.37, atol=1e-14)
    np.testing.assert_allclose(double_ball_average(q, 1.0).values, 0.37, atol=1e-14)


def test_single_cell_indicator_average_1d():
    g = TorusGrid(1, 40.0, 40)
    v = np.zeros(40)
    v[20] = 1.0
    avg = ball_average(TestFunction(g, v), 3.0).values
    count = ball_kernel(g, 3.0).count
    assert count == 5
    np.testing.assert_allclose(avg[18:23], 1.0 / count, atol=1e-15)
    np.testing.assert_allclose(np.delete(avg, range(18, 23)), 0.0, atol=1e-15)


@pytest.mark.parametrize("cells", [8.5, 16.5, 32.5])
def test_quadratic_moment_1d(cells):
    # Continuum: <|x|^2> = |x|^2 + r^2/3 and <<|x|^2>> = |x|^2 + 2r^2/3 (d = 1).
    r = 1.0
    g = fit_grid(1, 10.0, r, cells)
    x = g.centers() - g.L / 2
    phi = TestFunction(g, x * x)
    mid = np.abs(x) < 2
    one = ball_average(phi, r).values[mid] - (x * x)[mid]
    two = double_ball_average(phi, r).values[mid] - (x * x)[mid]
    # Half-integer r/h: the discrete second moment differs by exactly h^2/12 per average.
    np.testing.assert_allclose(one, r * r / 3 - g.h**2 / 12, atol=1e-10)
    np.testing.assert_allclose(two, 2 * r * r / 3 - g.h**2 / 6, atol=1e-10)


def test_quadratic_moment_2d_error_shrinks_with_h():
    r = 1.0
    errs = []
    for cells in (8.5, 16.5):
        g = fit_grid(2, 8.0, r, cells)
        X, Y = g.coordinates()
        sq = (X - g.L / 2) ** 2 + (Y - g.L / 2) ** 2
        avg = ball_average(TestFunction(g, sq), r).values
        mid = sq < 1
        errs.append(np.max(np.abs(avg[mid] - sq[mid] - 2 * r * r / 4)))
    assert errs[1] < errs[0]
    assert errs[1] < 0.02


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.sampled_from([1.0, 1.7, 2.5]))
def test_average_is_contraction_and_conserves_mass(seed, r):
    g = fit_grid(1, 30.0, 1.0, 8.5)
    v = np.random.default_rng(seed).random(g.shape)
    q = FrequencyField(g, v)
    a = ball_average(q, r).values
    aa = double_ball_average(q, r).values
    assert a.max() <= v.max() + 1e-14 and a.min() >= v.min() - 1e-14
    one = TestFunction(g, np.ones(g.shape))
    assert pair(FrequencyField(g, a), one) == pytest.approx(pair(q, one), abs=1e-10)
    assert pair(FrequencyField(g, aa), one) == pytest.approx(pair(q, one), abs=1e-10)


def test_pair_examples():
    g = TorusGrid(1, 10.0, 50)
    phi = TestFunction.gaussian(g, [5.0], 1.0)
    assert pair(FrequencyField.constant(g, 1.0), phi) == pytest.approx(phi.norm1, rel=1e-14)
    q = FrequencyField(g, np.random.default_rng(0).random(50))
    assert pair(q, TestFunction(g, np.zeros(50))) == 0.0
    half = FrequencyField(g, (g.centers() < 5.0).astype(float))
    assert pair(half, TestFunction(g, np.ones(50))) == pytest.approx(5.0, rel=1e-14)


def test_pair_grid_mismatch():
    g1, g2 = TorusGrid(1, 10.0, 50), TorusGrid(1, 10.0, 60)
    with pytest.raises(GridMismatchError):
        pair(FrequencyField.constant(g1, 0.5), TestFunction(g2, np.ones(60)))


def test_xi_distance_properties():
    g = fit_grid(1, 20.0, 1.0, 8.5)
    fam = XiMetricFamily(g)
    rng = np.random.default_rng(4)
    f = FrequencyField(g, rng.random(g.shape))
    h = FrequencyField(g, rng.random(g.shape))
    assert xi_distance(f, f, fam) == 0.0
    assert xi_distance(f, h, fam) == xi_distance(h, f, fam)
    assert np.all(fam.norms1() <= 1 + 1e-12)
    zero, one = FrequencyField.constant(g, 0.0), FrequencyField.constant(g, 1.0)
    expected = np.sum(2.0 ** -np.arange(1, 17) * fam.norms1())
    assert xi_distance(zero, one, fam) == pytest.approx(expected, rel=1e-13)


def test_xi_family_rejects_empty():
    with pytest.raises(ValueError):
        XiMetricFamily(TorusGrid(1, 1.0, 8), n_max=0)


def test_xi_family_separates_cell_perturbations():
    g = TorusGrid(1, 8.0, 16)
    fam = XiMetricFamily(g, n_max=32)
    base = np.full(16, 0.5)
    for i in range(16):
        v = base.copy()
        v[i] += 0.1
        assert xi_distance(FrequencyField(g, base), FrequencyField(g, v), fam) > 0


def test_snapshot_roundtrip(tmp_path):
    g = TorusGrid(2, 3.5, 7)
    v = np.random.default_rng(2).random(g.shape)
    write_snapshot(tmp_path / "s.bin", g, v)
    g2, v2 = read_snapshot(tmp_path / "s.bin")
    assert g2 == g
    assert np.array_equal(v.view(np.uint64), v2.view(np.uint64))
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:4] == b"SLFV"


def test_frequency_field_rejects_out_of_range():
    with pytest.raises(ValueError):
        FrequencyField(TorusGrid(1, 1.0, 8), np.full(8, 1.5))
