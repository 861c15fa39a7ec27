import csv

import numpy as np
import pytest

from slfv.driftload import DriftLoadConfig, DriftLoadResult, DriftLoadRow, c_n_model, measure_drift_load, probe_cells
from slfv.errors import ConfigError
from slfv.lattice import TorusGrid


@pytest.mark.parametrize(
    "d, delta, expected",
    [(3, 0.1, 1.0), (2, 0.1, 4.605170185988091), (1, 0.1, 10.0), (1, 1.0, 1.0), (2, 1.0, 0.0)],
)
def test_c_n_model(d, delta, expected):
    assert c_n_model(d, delta) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("d, delta", [(4, 0.1), (1, 0.0), (1, 1.5)])
def test_c_n_model_rejects(d, delta):
    with pytest.raises(ValueError):
        c_n_model(d, delta)


def _small(**kw):
    base = dict(
        d=1, deltas=(0.5, 0.4), s1=0.45, s2=0.45, nu1=0.01, nu2=0.01, eps_rule="explicit", eps=(0.5, 0.5),
        domain=4.0, horizon_factor=1.0, replicates=3, n_samples=4, seed=7,
    )
    base.update(kw)
    return DriftLoadConfig(**base)


@pytest.fixture(scope="module")
def small_result():
    return measure_drift_load(_small())


def test_load_is_nonnegative_and_mutation_keeps_interior(small_result):
    for row in small_result.rows:
        assert row.load >= 0 and row.se >= 0
        assert 0 < row.min_cell <= row.max_cell < 1
        assert row.ratio == pytest.approx(row.load / (row.eps * row.delta**2), rel=1e-12)
        assert row.normalized == pytest.approx(row.ratio / c_n_model(1, row.delta), rel=1e-12)


def test_sweep_is_reproducible(small_result):
    again = measure_drift_load(_small())
    assert [r.load for r in again.rows] == [r.load for r in small_result.rows]
    other = measure_drift_load(_small(seed=8))
    assert [r.load for r in other.rows] != [r.load for r in small_result.rows]


def test_csv_columns(small_result, tmp_path):
    path = small_result.write_csv(tmp_path / "load.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["N", "d", "delta", "eps", "load", "se", "ratio", "normalized", "c_n"]
    assert len(rows) == 3
    assert float(rows[1][4]) == small_result.rows[0].load


def test_surrogate_rule_warns():
    assert _small().warnings
    assert not _small(eps_rule="power", eps=None, eps_power=5.0).warnings


@pytest.mark.parametrize(
    "kw, key",
    [
        (dict(d=4), "d"),
        (dict(deltas=(0.5, 1.5)), "deltas"),
        (dict(eps_rule="power", eps=None, eps_power=4.0), "eps_power"),
        (dict(eps=(0.5,)), "eps"),
        (dict(replicates=2), "replicates"),
        (dict(n_samples=3), "n_samples"),
        (dict(u=0.0), "u"),
        (dict(eps_rule="quadratic"), "eps_rule"),
    ],
)
def test_config_validation(kw, key):
    with pytest.raises(ConfigError) as info:
        _small(**kw)
    assert key in [k for k, _ in info.value.problems]


def test_config_rejects_unstable_equilibrium():
    with pytest.raises(ConfigError):
        _small(s1=-0.2, s2=-0.2, nu1=0.0, nu2=0.0)


def test_config_reports_every_problem():
    with pytest.raises(ConfigError) as info:
        _small(d=5, replicates=1, n_samples=2)
    assert {"d", "replicates", "n_samples"} <= {k for k, _ in info.value.problems}


def _row(i, delta, load, se):
    eps = 0.1
    ratio = load / (eps * delta**2)
    return DriftLoadRow(i, 1, delta, eps, load, se, ratio, ratio * delta, 1 / delta, load, se, load, se, 0.1, 0.9, 10)


def test_slope_matches_weighted_fit():
    deltas = np.array([0.4, 0.2, 0.1, 0.05])
    loads = 0.1 * deltas**2 * 3.0 * deltas**-1.0
    rel = np.array([0.05, 0.02, 0.08, 0.04])
    res = DriftLoadResult(_small(), [_row(i, d, l, r * l) for i, (d, l, r) in enumerate(zip(deltas, loads, rel))])
    b, se = res.slope()
    assert b == pytest.approx(-1.0, abs=1e-12)
    ref = np.polyfit(np.log(deltas), np.log(loads / (0.1 * deltas**2)), 1, w=1 / rel)
    assert b == pytest.approx(ref[0], abs=1e-12)
    assert se > 0
    assert res.normalized_spread() == pytest.approx(1.0, rel=1e-12)


def test_slope_needs_two_rows():
    with pytest.raises(ValueError):
        DriftLoadResult(_small(), [_row(0, 0.1, 1.0, 0.1)]).slope()


def test_stationary_flag():
    r = _row(0, 0.1, 1.0, 0.1)
    assert r.stationary
    r.load_q4 = 2.0
    assert not r.stationary


def test_segregation_load():
    assert DriftLoadResult(_small()).segregation_load == pytest.approx(0.45 * 0.45 / 0.9)


@pytest.mark.parametrize("d, n, k", [(1, 40, 8), (2, 32, 8), (3, 12, 8)])
def test_probe_cells_distinct_and_in_range(d, n, k):
    pts = probe_cells(TorusGrid(d, 10.0, n), k)
    assert len(set(pts)) == k
    assert all(len(p) == d and all(0 <= c < n for c in p) for p in pts)
