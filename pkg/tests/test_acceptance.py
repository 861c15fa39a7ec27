"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in the
"acceptance criteria" section of the terminal summary. Criterion 9 carries
the ``slow`` marker (about 20 minutes on one core).
"""

import numpy as np
import pytest

from slfv.diagnostics import (
    k_alpha,
    martingale_observers,
    martingale_residual_check,
    one_event_mean_increment_constant,
    rho_r,
    sigma_r,
)
from slfv.driftload import DriftLoadConfig, measure_drift_load
from slfv.events import EventLaw, FixedRadius, RngStream, StablePareto, apply_event, draw_event, replay_events, run_trajectory
from slfv.experiments import fluctuation_variance_study, operator_convergence_D, operator_convergence_L
from slfv.lattice import (
    FrequencyField,
    TestFunction,
    TorusGrid,
    XiMetricFamily,
    ball_average_values,
    double_ball_average_values,
    fit_grid,
    xi_distance_values,
)
from slfv.models import Genic, Overdominance
from slfv.scaling import ScalingParams
from slfv.solvers import (
    LimitBrownian,
    f_of_t,
    levy_semigroup_apply,
    op_D_alpha_delta,
    op_L_r,
    solve_centering_brownian,
    solve_limit_pde,
)


def _orders(rows):
    return [r[2] for r in rows[1:]]


# 1 ------------------------------------------------------------------------


def test_criterion_01_L_r_order(acceptance):
    orders = _orders(operator_convergence_L(halvings=3))
    ok = len(orders) == 3 and all(1.9 <= o <= 2.1 for o in orders)
    acceptance(1, "L^(r) consistency order", ok, "orders " + ", ".join(f"{o:.4f}" for o in orders) + " in [1.9, 2.1]")


# 2 ------------------------------------------------------------------------


def test_criterion_02_D_alpha_delta_order(acceptance):
    orders = _orders(operator_convergence_D(alpha=0.5, halvings=3))
    ok = all(1.3 <= o <= 1.7 for o in orders)
    acceptance(2, "D^(alpha,delta) consistency order", ok, "orders " + ", ".join(f"{o:.4f}" for o in orders) + " in [1.3, 1.7]")


# 3 ------------------------------------------------------------------------


def _logistic(w, c, t):
    return w * np.exp(-c * t) / (1 - w + w * np.exp(-c * t))


def test_criterion_03_logistic(acceptance):
    T, w = 5.0, 0.4
    times = np.linspace(0, T, 501)
    p = ScalingParams(1e-4, 0.1, 1.0, 1.0, 1)
    grid = fit_grid(1, 20.0, 1.0, 8.5).scaled(0.1)
    fN = solve_centering_brownian(np.full(grid.shape, w), grid, p, Genic(), T, times=times)
    lim = solve_limit_pde(np.full((64,), w), TorusGrid(1, 4.0, 64), p, Genic(), T, times=times)
    c = p.u * 2 * p.R * p.s
    exact = _logistic(w, c, times)[:, None]
    e_cent = float(np.max(np.abs(fN.values - exact)))
    e_lim = float(np.max(np.abs(lim.values - exact)))
    ok = max(e_cent, e_lim) <= 1e-4
    acceptance(3, "logistic oracle", ok, f"sup error centering {e_cent:.3e}, limit {e_lim:.3e} (<= 1e-4)")


# 4 ------------------------------------------------------------------------


def test_criterion_04_centering_order(acceptance):
    h = 0.1 / 10.5
    n = round(20 / h)
    g = TorusGrid(1, n * h, n)
    x = g.centers() - g.L / 2
    w0 = 0.5 + 0.4 * np.exp(-x * x / 2) * np.cos(x)
    T = 0.25
    times = np.linspace(0, T, 11)
    base = ScalingParams(1e-3, 1.0, 1.0, 1.0, 1)
    dt = LimitBrownian(g, base, Genic()).max_dt()
    fl = solve_limit_pde(w0, g, base, Genic(), T, times=times, dt=dt)
    errs, deltas = [], []
    for m in (10.5, 20.5, 40.5):
        p = ScalingParams(1e-3, m * h, 1.0, 1.0, 1)
        fN = solve_centering_brownian(w0, g, p, Genic(), T, times=times, dt=dt, moment_matched=True)
        errs.append(float(np.max(np.abs(fN.values - fl.values))))
        deltas.append(m * h)
    orders = [np.log(errs[i + 1] / errs[i]) / np.log(deltas[i + 1] / deltas[i]) for i in range(2)]
    ok = all(1.8 <= o <= 2.2 for o in orders)
    acceptance(4, "centering convergence order", ok,
               "errors " + ", ".join(f"{e:.3e}" for e in errs) + "; orders " + ", ".join(f"{o:.4f}" for o in orders))


# 5 ------------------------------------------------------------------------

MODELS = {
    "genic-fixed": (Genic(), EventLaw(0.5, FixedRadius(1.0), s=0.5)),
    "genic-stable": (Genic(), EventLaw(0.5, StablePareto(0.5, 5.0), s=0.5)),
    "diploid-fixed": (Overdominance(0.3, 0.2, 0.01, 0.02), EventLaw(0.5, FixedRadius(1.0))),
    "diploid-stable": (Overdominance(0.3, 0.2, 0.01, 0.02), EventLaw(0.5, StablePareto(0.5, 5.0))),
}


def test_criterion_05_one_event_drift(acceptance):
    grid = fit_grid(1, 30.0, 1.0, 8.5)
    phi = TestFunction.gaussian(grid, [15.0], 3.0)
    w = 0.4
    q = FrequencyField.constant(grid, w)
    base = float(np.sum(q.values * phi.values) * grid.h)
    n = 20000
    parts, ok = [], True
    for j, (name, (model, law)) in enumerate(MODELS.items()):
        rng = RngStream(5, j).generator()
        inc = np.empty(n)
        for i in range(n):
            q2, _ = apply_event(q, draw_event(grid, law, model, rng), law.u, model)
            inc[i] = np.sum(q2.values * phi.values) * grid.h - base
        z = (inc.mean() - one_event_mean_increment_constant(grid, w, phi, law, model)) / (inc.std(ddof=1) / np.sqrt(n))
        ok &= abs(z) <= 3
        parts.append(f"{name} z={z:+.2f}")
    acceptance(5, "one-event martingale drift", ok, "; ".join(parts) + f" ({n} events each, |z| <= 3)")


# 6 ------------------------------------------------------------------------


def test_criterion_06_quadratic_variation(acceptance):
    grid = fit_grid(1, 30.0, 1.0, 8.5)
    x = grid.centers()
    phi = TestFunction.gaussian(grid, [15.0], 2.0)
    q0 = FrequencyField(grid, 0.5 + 0.3 * np.sin(2 * np.pi * x / grid.L))
    cases = [("haploid", Genic(), EventLaw(0.3, FixedRadius(1.0), s=0.1)),
             ("diploid", Overdominance(0.1, 0.05, 0.01, 0.01), EventLaw(0.3, FixedRadius(1.0)))]
    parts, ok = [], True
    T, times, n = 1.0, np.linspace(0, 1.0, 6), 4000
    for j, (name, model, law) in enumerate(cases):
        obs = martingale_observers(grid, phi, law, model)
        P, D, Q = [], [], []
        for k in range(n):
            rec = run_trajectory(q0, law, model, T, RngStream(11 + j, k), sample_times=times, observers=obs)
            P.append(rec.observations["pairing"])
            D.append(rec.observations["drift"])
            Q.append(rec.observations["qv"])
        est = martingale_residual_check(times, np.array(P), np.array(D), np.array(Q))
        ok &= est.qv_within(0.05, 3.0)
        parts.append(f"{name} var {est.qv_estimate:.4e} vs {est.qv_oracle:.4e} (z={est.qv_z:+.2f})")
    diag = []
    for w in (0.1, 0.5, 0.77):
        c = np.full(grid.shape, w)
        # Algebraically exact; the two kernels evaluate different polynomials, so compare to a few ulps.
        rho, sig = rho_r(grid, c, 40, 40, 1.0), sigma_r(grid, c, 40, 40, 1.0)
        diag.append(abs(rho - 0.5 * sig) <= 1e-13 * rho)
    ok &= all(diag)
    acceptance(6, "quadratic variation", ok, "; ".join(parts) + f"; rho = sigma/2 on constants (1e-13 rel): {all(diag)}")


# 7 ------------------------------------------------------------------------


def test_criterion_07_deterministic_limit(acceptance):
    Lam, T = 4.0, 1.0
    times = np.linspace(0, T, 21)
    reps = 32
    means, ses = [], []
    for delta in (0.2, 0.14, 0.1):
        p = ScalingParams(eps=delta**4, delta=delta, u=1.0, s=1.0, d=1, R=1.0)
        raw = fit_grid(1, Lam / delta, 1.0, 8.5)
        g = raw.scaled(delta)
        w0 = 0.5 + 0.3 * np.sin(2 * np.pi * g.centers() / g.L)
        fN = solve_centering_brownian(w0, g, p, Genic(), T, times=times)
        fam = XiMetricFamily(g)
        law = EventLaw(p.u_N, FixedRadius(1.0), s=p.s_N)
        sups = []
        for k in range(reps):
            rec = run_trajectory(FrequencyField(raw, w0), law, Genic(), p.raw_time(T), RngStream(7, k),
                                 sample_times=p.raw_time(times), keep_snapshots=True)
            sups.append(max(xi_distance_values(fam, s, fN.values[j]) for j, s in enumerate(rec.snapshots)))
        means.append(float(np.mean(sups)))
        ses.append(float(np.std(sups, ddof=1) / np.sqrt(reps)))
    ok = means[0] > means[1] > means[2]
    acceptance(7, "deterministic limit", ok, "mean sup d_Xi " + ", ".join(f"{m:.4e}+-{s:.1e}" for m, s in zip(means, ses))
               + " at delta 0.2, 0.14, 0.1 (decreasing)")


# 8 ------------------------------------------------------------------------


def test_criterion_08_fluctuation_variance(acceptance):
    delta, Lam, T = 0.2, 8.0, 1.0
    times = np.linspace(0, T, 5)
    p = ScalingParams(eps=delta**4, delta=delta, u=1.0, s=1.0, d=1, R=1.0)
    raw = fit_grid(1, Lam / delta, 1.0, 8.5)
    g = raw.scaled(delta)
    w0 = 0.5 + 0.3 * np.sin(2 * np.pi * g.centers() / g.L)
    phi = TestFunction.gaussian(g, [Lam / 2], 1.0)
    law = EventLaw(p.u_N, FixedRadius(1.0), s=p.s_N)
    res = fluctuation_variance_study(p, raw, law, Genic(), w0, phi, times, 1600, 3)
    last = res[-1]
    ok = 0.85 <= last.ratio <= 1.15
    series = ", ".join(f"t={r.t:g}: {r.ratio:.3f}" for r in res)
    acceptance(8, "fluctuation CLT variance", ok,
               f"Var/oracle at T: {last.ratio:.4f} (+-{last.se / last.oracle_limit:.3f}) in [0.85, 1.15]; {series}; "
               f"centering-oracle ratio {last.estimate / last.oracle_centering:.4f}")


# 9 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_drift_load(acceptance):
    c1 = DriftLoadConfig(d=1, deltas=(0.2, 0.14, 0.1, 0.07), s1=0.45, s2=0.45, nu1=0.002, nu2=0.002,
                         eps_rule="linear", eps_scale=0.05, replicates=24, domain=20.0, seed=9)
    slope, se = measure_drift_load(c1).slope()
    d2 = (0.4, 0.28, 0.2, 0.14)
    c2 = DriftLoadConfig(d=2, deltas=d2, s1=0.45, s2=0.45, nu1=0.002, nu2=0.002, eps_rule="explicit",
                         eps=tuple(0.12 / abs(np.log(x * x)) for x in d2), replicates=16, domain=8.0,
                         horizon_factor=8.0, seed=9)
    spread = measure_drift_load(c2).normalized_spread()
    ok = abs(slope + 1) <= 0.15 and spread <= 1.5
    acceptance(9, "drift load scaling", ok,
               f"d=1 slope {slope:.4f}+-{se:.4f} (-1 +- 0.15); d=2 normalized max/min {spread:.4f} (<= 1.5); "
               "eps rules are desk-scale surrogates")


# 10 -----------------------------------------------------------------------


def test_criterion_10_semigroup_asymptotics(acceptance):
    g = fit_grid(1, 400.0, 1.0, 8.5)
    x = g.centers() - g.L / 2
    phi = TestFunction(g, np.where(np.abs(x) < 1, 0.5 * (1 + np.cos(np.pi * x)), 0.0))
    t = 100.0
    ratio = f_of_t(g, phi, t) * np.sqrt(4 * np.pi * t) / phi.norm1**2
    acceptance(10, "semigroup asymptotics", 0.95 <= ratio <= 1.05, f"ratio at t=100 {ratio:.5f} in [0.95, 1.05]")


# 11 -----------------------------------------------------------------------


def test_criterion_11_k_alpha_power_law(acceptance):
    s = np.geomspace(0.5, 5.0, 11)
    parts, ok = [], True
    for d in (1, 2):
        for alpha in (0.5, 1.0):
            slope = np.polyfit(np.log(s), np.log(k_alpha(d, s, alpha)), 1)[0]
            ok &= abs(slope + alpha) <= 0.02
            parts.append(f"d={d} alpha={alpha}: {slope:.6f}")
    acceptance(11, "K_alpha power law", ok, "; ".join(parts))


# 12 -----------------------------------------------------------------------


def test_criterion_12_invariants(acceptance):
    checks = {}
    grid = fit_grid(1, 20.0, 1.0, 8.5)
    rng = np.random.default_rng(12)
    q0 = FrequencyField(grid, rng.random(grid.shape))
    phi = TestFunction.gaussian(grid, [10.0], 2.0)

    in_range, replay_ok = True, True
    for j, (model, law) in enumerate(MODELS.values()):
        rec = run_trajectory(q0, law, model, 200.0, RngStream(12, j), sample_times=np.linspace(0, 200, 21),
                             keep_snapshots=True, log_events=True)
        in_range &= all(s.min() >= 0 and s.max() <= 1 for s in rec.snapshots)
        again = replay_events(q0, law, model, rec.log)
        replay_ok &= np.array_equal(again.view(np.uint64), rec.final.view(np.uint64))
    checks["cells in [0,1]"] = in_range
    checks["bitwise replay"] = replay_ok

    jump_ok = True
    gen = RngStream(12, 99).generator()
    for model, law in MODELS.values():
        q = q0
        for _ in range(500):
            q2, _ = apply_event(q, draw_event(grid, law, model, gen), law.u, model)
            jump = abs(np.sum((q2.values - q.values) * phi.values) * grid.h)
            jump_ok &= jump <= law.u * phi.norm1 + 1e-12
            q = q2
    checks["jump bound u||phi||_1"] = jump_ok

    v = rng.random(grid.shape)
    mass = v.sum() * grid.h
    ops = {
        "ball average": ball_average_values(grid, v, 1.0).sum() * grid.h - mass,
        "double ball average": double_ball_average_values(grid, v, 1.0).sum() * grid.h - mass,
        "L_r": op_L_r(grid, v, 1.0).sum() * grid.h,
        "D_alpha_delta": op_D_alpha_delta(grid, v, 0.5, 1.0, 4.0).sum() * grid.h,
        "G_t": levy_semigroup_apply(grid, v, 1.0, 3.0).sum() * grid.h - mass,
    }
    worst = max(abs(e) for e in ops.values())
    checks["mass conservation 1e-10"] = worst <= 1e-10

    ok = all(checks.values())
    acceptance(12, "hard invariants", ok, "; ".join(f"{k}: {v}" for k, v in checks.items()) + f" (worst mass defect {worst:.1e})")
