"""Experiment orchestration: build objects from a config, run, write artifacts.

Every run writes into its own directory ``<out>/<kind>-<hash12>-seed<S>``.
The manifest is written before the run starts and finalized afterwards.
Artifacts carry no timestamps, so equal config and seed reproduce them
bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from . import __version__
from .config import STOCHASTIC_KINDS, ExperimentConfig, format_value, parse_config
from .diagnostics import (
    extract_fluctuations,
    martingale_observers,
    martingale_residual_check,
    spde_variance_oracle,
    write_report_csv,
)
from .driftload import DriftLoadConfig, measure_drift_load
from .errors import ConfigError, ReplayError
from .events import (
    RescaledTrajectory,
    RngStream,
    read_event_log,
    replay_events,
    run_trajectory,
    write_event_log,
)
from .lattice import FrequencyField, TestFunction, TorusGrid, fit_grid, write_snapshot
from .models import EventLaw, FixedRadius, GeneralF, Genic, Overdominance, StablePareto
from .reference import gaussian, gaussian_D_alpha_values, gaussian_d2
from .scaling import ScalingParams
from .solvers import PdeSolution, op_D_alpha_delta, op_L_r, solve_backward_testfn, solve_centering_brownian, solve_limit_pde

OUTPUT_ENV = "SLFV_OUTPUT_DIR"


# --------------------------------------------------------------------------
# plot data


def emit_plot_data(
    series: Mapping[str, Sequence[float]] | tuple[Sequence[float], Sequence[float]],
    path: str | Path,
    x_label: str = "x",
    y_label: str = "y",
    units: str = "dimensionless",
    provenance: str = "",
) -> Path:
    """Write a two-column text file with a ``#`` comment header.

    ``series`` is either ``(xs, ys)`` or a mapping with exactly two entries
    (x first). Values use 17 significant digits. An empty series writes the
    header only and warns; a non-finite value is rejected with its index.
    """
    if isinstance(series, Mapping):
        if len(series) != 2:
            raise ValueError("a plot series needs exactly two columns")
        (x_label, xs), (y_label, ys) = list(series.items())
    else:
        xs, ys = series
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if len(xs) != len(ys):
        raise ValueError("columns differ in length")
    for name, col in ((x_label, xs), (y_label, ys)):
        bad = np.flatnonzero(~np.isfinite(col))
        if len(bad):
            raise ValueError(f"non-finite value in column {name} at index {int(bad[0])}")
    path = Path(path)
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise OSError(f"cannot write plot data to {path}: {exc}") from exc
    with fh:
        fh.write(f"# columns: {x_label} {y_label}\n# units: {units}\n")
        if provenance:
            fh.write(f"# provenance: {provenance}\n")
        for a, b in zip(xs, ys):
            fh.write(f"{a:.17g} {b:.17g}\n")
    if len(xs) == 0:
        warnings.warn(f"empty plot series written to {path}", stacklevel=2)
    return path


# --------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    kind: str
    seeds: list[int]
    directory: str
    status: str = "running"
    started: float = 0.0
    finished: float | None = None
    wall_seconds: float | None = None
    artifacts: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write(self) -> Path:
        path = Path(self.directory) / "manifest.json"
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Artifacts:
    def __init__(self, root: Path):
        self.root = root
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in p.parents and p != self.root.resolve():
            raise ValueError(f"artifact {name} would leave the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def listing(self) -> list[dict]:
        return [{"path": str(p.relative_to(self.root.resolve())), "sha256": _sha256(p)} for p in self.paths if p.exists()]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# --------------------------------------------------------------------------
# builders


def build_model(cfg: ExperimentConfig) -> GeneralF | Overdominance:
    mo = cfg.values["model"]
    if mo["type"] == "genic":
        return Genic()
    if mo["type"] == "general":
        return GeneralF(mo["m"], mo["p"])
    return Overdominance(mo["s1"], mo["s2"], mo["nu1"], mo["nu2"])


def build_law(cfg: ExperimentConfig) -> EventLaw:
    ev = cfg.values["events"]
    radius = FixedRadius(ev["R"]) if ev["radius_law"] == "fixed" else StablePareto(ev["alpha"], ev["r_max"])
    s = cfg.values["model"]["s"] if cfg.values["model"]["type"] != "overdominance" else 0.0
    return EventLaw(u=ev["u"], radius=radius, s=s)


def build_grid(cfg: ExperimentConfig) -> TorusGrid:
    ev = cfg.values["events"]
    rmin = ev["R"] if ev["radius_law"] == "fixed" else 1.0
    return fit_grid(cfg.values["grid"]["d"], cfg.values["grid"]["length"], rmin, cfg.values["grid"]["cells_per_radius"])


def initial_values(grid: TorusGrid, profile: str, w: float, amplitude: float, width: float) -> NDArray[np.float64]:
    """Constant, sine (one period along the first axis) or centered Gaussian bump."""
    if profile == "constant":
        return np.full(grid.shape, float(w))
    coords = grid.coordinates()
    if profile == "sine":
        return w + amplitude * np.sin(2 * np.pi * coords[0] / grid.L)
    r2 = sum((c - grid.L / 2) ** 2 for c in coords)
    return w + amplitude * np.exp(-r2 / (2 * width * width))


def _initial(cfg: ExperimentConfig, grid: TorusGrid) -> FrequencyField:
    ini = cfg.values["initial"]
    return FrequencyField(grid, initial_values(grid, ini["profile"], ini["w"], ini["amplitude"], ini["width"]))


def _phi(grid: TorusGrid, width: float) -> TestFunction:
    return TestFunction.gaussian(grid, np.full(grid.d, grid.L / 2), width)


def _pool_map(fn: Callable, args: Sequence[tuple], threads: int) -> list:
    if threads <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, *zip(*args)))


# --------------------------------------------------------------------------
# operator convergence


def operator_convergence_L(halvings: int = 3, sigma: float = 1.0) -> list[tuple[float, float, float]]:
    """``sup |L^(r) phi - phi''/2|`` for a 1-d Gaussian as ``r`` roughly halves.

    Radii are ``(m + 1/2) h`` so that the discrete ball has exactly the
    continuum length ``2r``; orders use the actual radius ratios. The
    discrete ball's second moment is off by ``h^2/12``, a relative
    ``O((h/r)^2)`` bias that would mask the ``O(r^2)`` term near
    ``r/h = 16``, so the smallest radius spans 160.5 cells. Returns rows
    ``(r, error, order)`` with ``nan`` order in the first row.
    """
    h = 0.05 / 160.5
    grid = TorusGrid(1, round(20.0 / h) * h, round(20.0 / h))
    x = grid.centers() - grid.L / 2
    phi = gaussian(x, sigma)
    target = 0.5 * gaussian_d2(x, sigma)
    m = 160.5
    rows: list[tuple[float, float, float]] = []
    for _ in range(halvings + 1):
        r = m * h
        err = float(np.max(np.abs(op_L_r(grid, phi, r) - target)))
        order = math.nan if not rows else math.log(err / rows[-1][1]) / math.log(r / rows[-1][0])
        rows.append((r, err, order))
        m = 2 * m - 0.5
    return rows


def operator_convergence_D(alpha: float = 0.5, halvings: int = 3, r_max: float = 8.0, sigma: float = 1.0) -> list[tuple[float, float, float]]:
    """``sup |D^(alpha,delta) phi - D^(alpha) phi|`` over ``|x| < 4`` as ``delta`` doubles (d = 1).

    The reference is adaptive quadrature of the closed-form double-average
    defect of the Gaussian. Returns rows ``(delta, error, order)``.
    """
    h = 0.05 / 20.5
    n = round(40.0 / h)
    grid = TorusGrid(1, n * h, n)
    x = grid.centers() - grid.L / 2
    idx = np.arange(0, n, 41)
    idx = idx[np.abs(x[idx]) < 4]
    ref = gaussian_D_alpha_values(x[idx], alpha, r_max, sigma)
    vals = gaussian(x, sigma)
    m = 20.5
    rows: list[tuple[float, float, float]] = []
    for _ in range(halvings + 1):
        delta = m * h
        err = float(np.max(np.abs(op_D_alpha_delta(grid, vals, alpha, delta, r_max)[idx] - ref)))
        order = math.nan if not rows else math.log(err / rows[-1][1]) / math.log(delta / rows[-1][0])
        rows.append((delta, err, order))
        m = 2 * m - 0.5
    return rows


# --------------------------------------------------------------------------
# experiment kinds


def _run_trajectory_kind(cfg: ExperimentConfig, seed: int, art: _Artifacts, manifest: RunManifest) -> None:
    grid = build_grid(cfg)
    law = build_law(cfg)
    model = build_model(cfg)
    q0 = _initial(cfg, grid)
    run = cfg.values["run"]
    times = np.linspace(0.0, run["horizon"], run["n_samples"])
    if isinstance(law.radius, StablePareto):
        manifest.warnings.append(f"Pareto truncation mass beyond r_max: {law.radius.truncated_mass(grid.d):.17g}")
    rec = run_trajectory(
        q0, law, model, run["horizon"], RngStream(seed, 0), sample_times=times,
        observers={"stats": lambda t, q: (float(q.mean()), float(q.min()), float(q.max()))},
        keep_snapshots=run["snapshots"], log_events=run["log_events"],
    )
    for k, snap in enumerate(rec.snapshots):
        write_snapshot(art.path(f"snapshots/snap_{k:05d}.bin"), grid, snap)
    write_snapshot(art.path("initial.bin"), grid, q0.values)
    write_snapshot(art.path("final.bin"), grid, rec.final)
    stats = np.array(rec.observations["stats"])
    _write_csv(art.path("observations.csv"), ["t", "mean", "min", "max"],
               [(float(t), *row) for t, row in zip(times, stats)])
    emit_plot_data((times, stats[:, 0]), art.path("mean_vs_t.dat"), "t", "mean_frequency", "raw time",
                   f"trajectory config {cfg.digest[:12]} seed {seed}")
    if run["log_events"]:
        write_event_log(art.path("events.log"), rec.log, cfg.digest)


def _martingale_replicate(ini_text: str, seed: int, k: int):
    cfg = parse_config(ini_text)
    grid = build_grid(cfg)
    law = build_law(cfg)
    model = build_model(cfg)
    run = cfg.values["run"]
    phi = _phi(grid, run["phi_width"])
    times = np.linspace(0.0, run["horizon"], run["n_samples"])
    obs = martingale_observers(grid, phi, law, model)
    rec = run_trajectory(_initial(cfg, grid), law, model, run["horizon"], RngStream(seed, k), sample_times=times, observers=obs)
    o = rec.observations
    return o["pairing"], o["drift"], o.get("qv")


def _run_martingale_kind(cfg: ExperimentConfig, seed: int, art: _Artifacts, manifest: RunManifest, threads: int) -> None:
    run = cfg.values["run"]
    ini = cfg.to_ini()
    res = _pool_map(_martingale_replicate, [(ini, seed, k) for k in range(run["replicates"])], threads)
    times = np.linspace(0.0, run["horizon"], run["n_samples"])
    pair = np.array([r[0] for r in res])
    drift = np.array([r[1] for r in res])
    qv = None if res[0][2] is None else np.array([r[2] for r in res])
    est = martingale_residual_check(times, pair, drift, qv, phi_name=f"gaussian_width_{run['phi_width']:g}")
    write_report_csv(est.rows(), art.path("diagnostics.csv"))


def _clt_replicate(ini_text: str, seed: int, k: int):
    cfg = parse_config(ini_text)
    params, raw_grid, law, model, times = _clt_setup(cfg)
    grid = raw_grid.scaled(params.delta)
    w0 = _clt_initial(cfg, grid)
    rec = run_trajectory(FrequencyField(raw_grid, w0), law, model, params.raw_time(times[-1]), RngStream(seed, k),
                         sample_times=params.raw_time(times), keep_snapshots=True)
    return rec.snapshots


def _clt_setup(cfg: ExperimentConfig):
    sc = cfg.values["scaling"]
    ev = cfg.values["events"]
    d = cfg.values["grid"]["d"]
    params = ScalingParams(eps=sc["eps"], delta=sc["delta"], u=ev["u"], s=sc["s"], d=d, R=ev["R"])
    raw_grid = fit_grid(d, sc["domain"] / sc["delta"], ev["R"], cfg.values["grid"]["cells_per_radius"])
    law = EventLaw(u=params.u_N, radius=FixedRadius(ev["R"]), s=params.s_N)
    model = build_model(cfg)
    times = np.linspace(0.0, cfg.values["run"]["horizon"], cfg.values["run"]["n_samples"])
    return params, raw_grid, law, model, times


def _clt_initial(cfg: ExperimentConfig, grid: TorusGrid) -> NDArray[np.float64]:
    ini = cfg.values["initial"]
    return initial_values(grid, ini["profile"], ini["w"], ini["amplitude"], ini["width"])


@dataclass(frozen=True)
class FluctuationVariance:
    """Variance of ``<Z_t, phi>`` over replicates against the SPDE oracles."""

    t: float
    estimate: float
    se: float
    oracle_limit: float
    oracle_centering: float
    replicates: int

    @property
    def ratio(self) -> float:
        return self.estimate / self.oracle_limit


#: Time nodes on [0, T] at which the oracle stores the centering and backward solutions.
ORACLE_NODES = 256


def fluctuation_variance_study(
    params: ScalingParams,
    raw_grid: TorusGrid,
    law: EventLaw,
    model,
    w0: NDArray[np.float64],
    phi: TestFunction,
    times: NDArray[np.float64],
    replicates: int,
    seed: int,
    snapshots: list | None = None,
) -> list[FluctuationVariance]:
    """Monte Carlo variance of ``<Z_t, phi>`` at every positive sample time.

    ``phi`` lives on the rescaled grid. Each replicate uses stream
    ``(seed, k)``. Oracles use the backward test functions of the limit
    equation (with the limit ``f``) and of the centering equation (with
    ``f^N``).
    """
    grid = raw_grid.scaled(params.delta)
    T = float(times[-1])
    # The backward solve freezes f between stored nodes, so store f densely.
    fine = np.union1d(np.asarray(times, dtype=float), np.linspace(0.0, T, ORACLE_NODES + 1))
    fN = solve_centering_brownian(w0, grid, params, model, T, times=fine)
    fL = solve_limit_pde(w0, grid, params, model, T, times=fine)
    if snapshots is None:
        snapshots = []
        for k in range(replicates):
            rec = run_trajectory(FrequencyField(raw_grid, w0), law, model, params.raw_time(T), RngStream(seed, k),
                                 sample_times=params.raw_time(times), keep_snapshots=True)
            snapshots.append(rec.snapshots)
    pairings = []
    for snaps in snapshots:
        view = RescaledTrajectory(grid, np.asarray(times, dtype=float), snaps, params)
        z = extract_fluctuations(view, fN)
        pairings.append(z.pairing(phi))
    pairings = np.array(pairings)
    out = []
    for j, t in enumerate(times):
        if t <= 0:
            continue
        col = pairings[:, j]
        c = col - col.mean()
        n = len(col)
        var = float(np.sum(c * c) / (n - 1))
        se = float(np.sqrt(max(np.mean(c**4) - var * var, 0.0) / n))
        node = int(np.argmin(np.abs(fine - t)))
        fN_t = _truncate(fN, node)
        fL_t = _truncate(fL, node)
        pair = solve_backward_testfn(phi, params, model, float(t), centering=fN_t, limit=fL_t)
        o_lim = spde_variance_oracle(pair.phi, fL_t, params)
        o_cen = spde_variance_oracle(pair.phi_N, fN_t, params)
        out.append(FluctuationVariance(float(t), var, se, o_lim, o_cen, n))
    return out


def _truncate(sol: PdeSolution, j: int) -> PdeSolution:
    return PdeSolution(sol.grid, sol.times[: j + 1], sol.values[: j + 1], sol.dt, sol.scheme, dict(sol.metadata))


def _run_clt_kind(cfg: ExperimentConfig, seed: int, art: _Artifacts, manifest: RunManifest, threads: int) -> None:
    params, raw_grid, law, model, times = _clt_setup(cfg)
    grid = raw_grid.scaled(params.delta)
    w0 = _clt_initial(cfg, grid)
    phi = _phi(grid, cfg.values["run"]["phi_width"])
    n = cfg.values["run"]["replicates"]
    ini = cfg.to_ini()
    snaps = _pool_map(_clt_replicate, [(ini, seed, k) for k in range(n)], threads)
    res = fluctuation_variance_study(params, raw_grid, law, model, w0, phi, times, n, seed, snapshots=snaps)
    rows = []
    for r in res:
        rows.append({"statistic": "fluctuation_variance", "phi": "gaussian", "t": r.t, "estimate": r.estimate,
                     "oracle": r.oracle_limit, "se": r.se, "z": (r.estimate - r.oracle_limit) / r.se if r.se else 0.0})
        rows.append({"statistic": "fluctuation_variance_centering_oracle", "phi": "gaussian", "t": r.t,
                     "estimate": r.estimate, "oracle": r.oracle_centering, "se": r.se,
                     "z": (r.estimate - r.oracle_centering) / r.se if r.se else 0.0})
    write_report_csv(rows, art.path("fluctuations.csv"))
    emit_plot_data(([r.t for r in res], [r.ratio for r in res]), art.path("variance_ratio_vs_t.dat"), "t",
                   "variance_over_oracle", "rescaled time", f"clt config {cfg.digest[:12]} seed {seed}")


def driftload_config(cfg: ExperimentConfig, seed: int) -> DriftLoadConfig:
    dl = cfg.values["driftload"]
    mo = cfg.values["model"]
    return DriftLoadConfig(
        d=cfg.values["grid"]["d"], deltas=dl["deltas"], s1=mo["s1"], s2=mo["s2"], nu1=mo["nu1"], nu2=mo["nu2"],
        u=cfg.values["events"]["u"], R=cfg.values["events"]["R"], eps_rule=dl["eps_rule"], eps_power=dl["eps_power"],
        eps_scale=dl["eps_scale"], eps=dl["eps"] or None, domain=dl["domain"], horizon_factor=dl["horizon_factor"],
        replicates=dl["replicates"], n_probes=dl["n_probes"], n_samples=dl["n_samples"],
        cells_per_radius=cfg.values["grid"]["cells_per_radius"], seed=seed,
    )


def _run_driftload_kind(cfg: ExperimentConfig, seed: int, art: _Artifacts, manifest: RunManifest) -> None:
    dcfg = driftload_config(cfg, seed)
    manifest.warnings.extend(dcfg.warnings)
    res = measure_drift_load(dcfg)
    res.write_csv(art.path("driftload.csv"))
    deltas = [r.delta for r in res.rows]
    emit_plot_data((deltas, [r.ratio for r in res.rows]), art.path("ratio_vs_delta.dat"), "delta",
                   "load_over_eps_delta2", "dimensionless", f"drift-load config {cfg.digest[:12]} seed {seed}")
    emit_plot_data((deltas, [r.normalized for r in res.rows]), art.path("normalized_vs_delta.dat"), "delta",
                   "load_over_eps_delta2_cN", "dimensionless", f"drift-load config {cfg.digest[:12]} seed {seed}")
    summary = [("segregation_load_base", res.segregation_load)]
    if len(res.rows) >= 2:
        b, se = res.slope()
        summary += [("slope", b), ("slope_se", se), ("normalized_max_over_min", res.normalized_spread())]
    _write_csv(art.path("driftload_summary.csv"), ["quantity", "value"], summary)


def _run_operator_kind(cfg: ExperimentConfig, art: _Artifacts) -> None:
    op = cfg.values["operators"]
    rows = [("L_r", *r) for r in operator_convergence_L(op["halvings"])]
    rows += [("D_alpha_delta", *r) for r in operator_convergence_D(op["alpha"], op["halvings"])]
    _write_csv(art.path("operator_orders.csv"), ["operator", "parameter", "sup_error", "order"], rows)
    for name in ("L_r", "D_alpha_delta"):
        sel = [r for r in rows if r[0] == name]
        emit_plot_data(([r[1] for r in sel], [r[2] for r in sel]), art.path(f"{name}_error.dat"), "parameter",
                       "sup_error", "dimensionless", f"operator-tests config {cfg.digest[:12]}")


def output_root(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    """``out`` argument, else the environment override, else the config value."""
    import os

    if out is not None:
        return Path(out)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.values["experiment"]["output"])


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, out: str | Path | None = None, threads: int | None = None) -> RunManifest:
    """Dispatch ``cfg`` to its module and write artifacts plus ``manifest.json``."""
    seed = cfg.seed if seed is None else seed
    if cfg.kind in STOCHASTIC_KINDS and seed is None:
        raise ConfigError([("experiment.seed", "stochastic experiments need an explicit seed")])
    seed = 0 if seed is None else int(seed)
    threads = cfg.values["experiment"]["threads"] if threads is None else threads
    root = output_root(cfg, out) / f"{cfg.kind}-{cfg.digest[:12]}-seed{seed}"
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.digest, __version__, cfg.kind, [seed], str(root), started=time.time())
    art = _Artifacts(root)
    (root / "config.ini").write_text(cfg.to_ini())
    art.paths.append((root / "config.ini").resolve())
    manifest.write()
    try:
        if cfg.kind == "trajectory":
            _run_trajectory_kind(cfg, seed, art, manifest)
        elif cfg.kind == "martingale-check":
            _run_martingale_kind(cfg, seed, art, manifest, threads)
        elif cfg.kind == "clt-fluctuations":
            _run_clt_kind(cfg, seed, art, manifest, threads)
        elif cfg.kind == "drift-load":
            _run_driftload_kind(cfg, seed, art, manifest)
        else:
            _run_operator_kind(cfg, art)
    except Exception as exc:
        manifest.status = "failed"
        manifest.warnings.append(f"{type(exc).__name__}: {exc}")
        manifest.finished = time.time()
        manifest.wall_seconds = manifest.finished - manifest.started
        manifest.write()
        raise RuntimeError(f"{cfg.kind} run {cfg.digest[:12]} seed {seed} failed: {exc}") from exc
    manifest.status = "complete"
    manifest.finished = time.time()
    manifest.wall_seconds = manifest.finished - manifest.started
    manifest.artifacts = art.listing()
    manifest.write()
    return manifest


def replay(log_path: str | Path, cfg: ExperimentConfig) -> tuple[FrequencyField, NDArray[np.float64]]:
    """Re-apply a logged trajectory run; returns the initial field and the final values."""
    log, digest = read_event_log(log_path)
    if digest != cfg.digest:
        raise ReplayError(f"log was written for config {digest[:12]}, not {cfg.digest[:12]}")
    if cfg.kind != "trajectory":
        raise ReplayError("only trajectory runs produce event logs")
    grid = build_grid(cfg)
    q0 = _initial(cfg, grid)
    final = replay_events(q0, build_law(cfg), build_model(cfg), log)
    return q0, final
