"""Nonlocal operators, centering and limit PDE solvers, backward test functions.

Every solver uses explicit Euler steps whose size is checked against a
declared stability bound. The drift of each equation is packaged as a
:class:`Drift` object carrying the nonlinear right-hand side, its
linearization (self-adjoint in the ``h^d`` pairing) and the step bound, so
forward and backward solvers share one definition.

All fields live on a :class:`~slfv.lattice.TorusGrid` in rescaled units.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from functools import lru_cache
from math import log10
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import scipy.fft
from numpy.typing import NDArray
from scipy import integrate
from scipy.stats import poisson

from .errors import GridMismatchError, InstabilityError, ResolutionError
from .lattice import (
    MIN_CELLS_PER_RADIUS,
    TestFunction,
    TorusGrid,
    _kernel_spectrum,
    ball_average_values,
    ball_kernel,
    ball_overlap_volume,
    ball_volume,
    double_ball_average_values,
    write_snapshot,
)
from .scaling import Regime, ScalingParams

#: Overshoot below this is treated as roundoff and clamped silently.
ROUNDOFF_OVERSHOOT = 1e-12
#: Overshoot beyond this aborts a forward solve.
UNSTABLE_OVERSHOOT = 1e-6
#: Tail weight below which the Poisson series of the jump semigroup is cut.
POISSON_TAIL = 1e-12


class Reaction(Protocol):
    """Anything exposing a selection function and its derivative."""

    def F(self, w): ...

    def dF(self, w): ...


@dataclass(frozen=True)
class FunctionReaction:
    """Reaction given by plain callables."""

    F_fn: Callable
    dF_fn: Callable

    def F(self, w):
        return self.F_fn(np.asarray(w, dtype=float))

    def dF(self, w):
        return self.dF_fn(np.asarray(w, dtype=float))


def _check_values(grid: TorusGrid, values) -> NDArray[np.float64]:
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise GridMismatchError(f"values of shape {values.shape} do not match grid {grid.shape}")
    return values


def _check_radius(grid: TorusGrid, r: float, what: str = "radius") -> None:
    if r < MIN_CELLS_PER_RADIUS * grid.h * (1 - 1e-12):
        raise ResolutionError(f"{what} {r:.6g} is below {MIN_CELLS_PER_RADIUS} cell widths ({grid.h:.6g} each)")


def _rfft(grid: TorusGrid, values):
    return scipy.fft.rfftn(values)


def _irfft(grid: TorusGrid, spec):
    return scipy.fft.irfftn(spec, s=grid.shape)


# --------------------------------------------------------------------------
# Brownian-regime operators


def second_moment_radius(grid: TorusGrid, r: float) -> float:
    """Radius of the continuum ball whose per-axis second moment equals the stencil's.

    A uniform point in a continuum ball of radius ``rho`` has per-axis
    variance ``rho^2/(d+2)``.
    """
    offs = ball_kernel(grid, r).offsets * grid.h
    var = float(np.mean(offs[:, 0] ** 2))
    return float(np.sqrt((grid.d + 2) * var))


def op_L_r(grid: TorusGrid, values, r: float, moment_matched: bool = False) -> NDArray[np.float64]:
    """Double-ball diffusion operator ``((d+2)/(2 r^2)) (<<phi>>(r) - phi)``.

    With ``moment_matched`` the prefactor uses the radius whose continuum
    second moment equals that of the discrete stencil, which removes the
    O(h^2/r^2) bias of the cell-center ball so that ``|x|^2`` maps exactly
    to ``d`` on the grid. The default uses ``r`` itself, which is the form
    the event dynamics generate.
    """
    values = _check_values(grid, values)
    _check_radius(grid, r)
    rho = second_moment_radius(grid, r) if moment_matched else r
    return (grid.d + 2) / (2 * rho * rho) * (double_ball_average_values(grid, values, r) - values)


def laplacian(grid: TorusGrid, values) -> NDArray[np.float64]:
    """Second-order central-difference Laplacian with periodic wrap."""
    values = _check_values(grid, values)
    out = -2.0 * grid.d * values
    for axis in range(grid.d):
        out = out + np.roll(values, 1, axis) + np.roll(values, -1, axis)
    return out / grid.h**2


# --------------------------------------------------------------------------
# radial quadrature for the stable regime


@dataclass(frozen=True)
class RadialQuadrature:
    """Weights for ``int_delta^r_max g(r) r^-(alpha+1) dr`` from samples of ``g``.

    Nodes are discrete balls. Each node's abscissa is the radius of the
    continuum ball of equal volume, so the quadrature sees the stencil that
    is actually applied. Between nodes ``g`` is taken linear in ``r^2``
    and the kernel moments are integrated exactly, which is exact for the
    ``g(r) ~ c r^2`` behaviour of ``<<phi>>(r) - phi`` at small ``r``. On
    ``[delta, r_0]`` the same ``r^2`` law is extrapolated from the first
    node; on ``[r_K, r_max]`` the last value is held.
    """

    grid: TorusGrid
    alpha: float
    delta: float
    r_max: float
    nominal: NDArray[np.float64]
    radii: NDArray[np.float64]
    weights: NDArray[np.float64]

    @property
    def size(self) -> int:
        return len(self.radii)


def _moment(beta: float, a: float, b: float) -> float:
    """``int_a^b r^-beta dr``."""
    if abs(beta - 1.0) < 1e-14:
        return float(np.log(b / a))
    return float((b ** (1 - beta) - a ** (1 - beta)) / (1 - beta))


@lru_cache(maxsize=64)
def radial_quadrature(
    grid: TorusGrid, alpha: float, delta: float, r_max: float, nodes_per_decade: int = 64
) -> RadialQuadrature:
    """Build the :class:`RadialQuadrature` between ``delta`` and ``r_max``."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    _check_radius(grid, delta, "delta")
    if 2 * r_max >= grid.L:
        raise ResolutionError("r_max must be below half the torus side")
    if r_max <= delta:
        return RadialQuadrature(grid, alpha, delta, r_max, np.zeros(0), np.zeros(0), np.zeros(0))
    n_nodes = max(2, int(np.ceil(nodes_per_decade * log10(r_max / delta))) + 1)
    candidates = np.geomspace(delta, r_max, n_nodes)
    nominal, radii, seen = [], [], set()
    v1 = ball_volume(grid.d, 1.0)
    for rho in candidates:
        # nudge up so a candidate sitting on a cell-center shell includes it
        k = ball_kernel(grid, float(rho) * (1 + 1e-12))
        if k.count in seen:
            continue
        seen.add(k.count)
        r_eff = (k.volume / v1) ** (1.0 / grid.d)
        if r_eff < delta * (1 - 1e-9) or r_eff > r_max * (1 + 1e-9):
            continue
        nominal.append(k.r)
        radii.append(r_eff)
    if not radii:
        raise ResolutionError("no discrete ball falls inside [delta, r_max]")
    nominal_a = np.array(nominal)
    r = np.array(radii)
    w = np.zeros(len(r))
    b = alpha + 1.0
    # [delta, r_0]: g = g_0 (r/r_0)^2
    if r[0] > delta:
        w[0] += _moment(b - 2, delta, r[0]) / r[0] ** 2
    for i in range(len(r) - 1):
        a_, b_ = r[i], r[i + 1]
        i0 = _moment(b, a_, b_)
        i2 = _moment(b - 2, a_, b_)
        c = (i2 - a_ * a_ * i0) / (b_ * b_ - a_ * a_)
        w[i] += i0 - c
        w[i + 1] += c
    if r[-1] < r_max:
        w[-1] += _moment(b, r[-1], r_max)
    return RadialQuadrature(grid, alpha, delta, r_max, nominal_a, r, w)


@lru_cache(maxsize=32)
def _D_multiplier(grid: TorusGrid, alpha: float, delta: float, r_max: float, nodes_per_decade: int):
    quad = radial_quadrature(grid, alpha, delta, r_max, nodes_per_decade)
    v1 = ball_volume(grid.d, 1.0)
    mult = np.zeros(scipy.fft.rfftn(np.zeros(grid.shape)).shape)
    for rho, w in zip(quad.nominal, quad.weights):
        spec = scipy.fft.rfftn(ball_kernel(grid, float(rho)).periodic_weights()).real
        mult += w * (spec * spec - 1.0)
    mult *= v1
    mult.setflags(write=False)
    return mult


def op_D_alpha_delta(
    grid: TorusGrid, values, alpha: float, delta: float, r_max: float, nodes_per_decade: int = 64
) -> NDArray[np.float64]:
    """Truncated nonlocal operator ``V_1 int_delta^r_max (<<phi>>(r) - phi) r^-(alpha+1) dr``.

    The operator is translation invariant, so the quadrature collapses to
    one Fourier multiplier per parameter set. Radii beyond ``r_max`` are
    dropped; :func:`D_alpha_tail_rate` gives the jump rate neglected.
    """
    values = _check_values(grid, values)
    if r_max <= delta:
        return np.zeros(grid.shape)
    mult = _D_multiplier(grid, float(alpha), float(delta), float(r_max), int(nodes_per_decade))
    return _irfft(grid, _rfft(grid, values) * mult)


def D_alpha_tail_rate(d: int, alpha: float, r_max: float) -> float:
    """Rate ``V_1 r_max^-alpha / alpha`` of the radii dropped beyond ``r_max``."""
    return ball_volume(d, 1.0) * r_max**-alpha / alpha


def op_D_alpha(
    grid: TorusGrid, values, alpha: float, r_max: float, nodes_per_decade: int = 64, delta_min: float | None = None
) -> NDArray[np.float64]:
    """Grid surrogate of the untruncated-core operator ``D^(alpha)``.

    Integrates from the smallest resolvable radius ``delta_min`` (default
    ``8.5 h``) and adds the core ``[0, delta_min]`` through the small-radius
    law ``<<phi>>(r) - phi ~ (r/delta_min)^2 (<<phi>>(delta_min) - phi)``.
    """
    values = _check_values(grid, values)
    dm = float(delta_min if delta_min is not None else (MIN_CELLS_PER_RADIUS + 0.5) * grid.h)
    out = op_D_alpha_delta(grid, values, alpha, dm, r_max, nodes_per_decade)
    quad = radial_quadrature(grid, float(alpha), dm, float(r_max), int(nodes_per_decade))
    r0, rho0 = quad.radii[0], quad.nominal[0]
    g0 = double_ball_average_values(grid, values, float(rho0)) - values
    core = ball_volume(grid.d, 1.0) * g0 / r0**2 * dm ** (2 - alpha) / (2 - alpha)
    return out + core


def F_delta(
    H: Callable,
    grid: TorusGrid,
    values,
    alpha: float,
    delta: float,
    r_max: float,
    include_tail: bool = True,
    nodes_per_decade: int = 64,
) -> NDArray[np.float64]:
    """``alpha int_1^inf <H(<f>)>(x, delta r) r^-(alpha+1) dr`` by radial quadrature.

    After the substitution ``rho = delta r`` the integral runs over
    ``rho`` in ``[delta, inf)``. Balls beyond ``r_max`` are not
    representable; with ``include_tail`` the integrand is held at its
    ``r_max`` value there (weight ``(delta/r_max)^alpha``), so constants map
    to ``H(w)`` exactly. Without it the result matches event dynamics whose
    radii are truncated at ``r_max``.
    """
    values = _check_values(grid, values)
    out = np.zeros(grid.shape)
    if r_max <= delta:
        if include_tail:
            raise ResolutionError("no representable radius between delta and r_max to anchor the tail")
        return out
    quad = radial_quadrature(grid, float(alpha), float(delta), float(r_max), int(nodes_per_decade))
    fhat = _rfft(grid, values)
    last = None
    for rho, w in zip(quad.nominal, quad.weights):
        spec = _kernel_spectrum(grid, float(rho))
        inner = _irfft(grid, fhat * spec)
        last = _irfft(grid, _rfft(grid, np.asarray(H(inner), dtype=float)) * spec)
        out += w * last
    out *= alpha * delta**alpha
    if include_tail and last is not None:
        # ``last`` belongs to the largest node, the closest available to r_max
        out += (delta / r_max) ** alpha * last
    return out


def quadrature_self_check(
    grid: TorusGrid, values, alpha: float, delta: float, r_max: float, nodes_per_decade: int = 64
) -> float:
    """Relative sup change of ``D^(alpha,delta)`` when the node density is halved."""
    fine = op_D_alpha_delta(grid, values, alpha, delta, r_max, nodes_per_decade)
    coarse = op_D_alpha_delta(grid, values, alpha, delta, r_max, max(2, nodes_per_decade // 2))
    scale = max(float(np.max(np.abs(fine))), 1e-300)
    return float(np.max(np.abs(fine - coarse)) / scale)


@dataclass(frozen=True)
class NonlocalKernel:
    """Tabulated jump kernels ``Phi`` and ``Phi^(delta)`` of the nonlocal operators.

    ``Phi^(delta)(s) = V_1 int_{max(delta, s/2)}^inf V_r(0, s)/V_r^2 r^-(alpha+1) dr``,
    and ``Phi`` is the same with ``delta = 0``.
    """

    d: int
    alpha: float
    delta: float
    separations: NDArray[np.float64]
    phi: NDArray[np.float64]
    phi_delta: NDArray[np.float64]


def _phi_kernel(d: int, alpha: float, delta: float, s: float) -> float:
    v1 = ball_volume(d, 1.0)

    def integrand(r):
        vr = ball_volume(d, r)
        return ball_overlap_volume(d, r, s) / (vr * vr) * r ** -(alpha + 1)

    lo = max(delta, s / 2)
    if lo == 0:
        raise ValueError("Phi diverges at zero separation")
    val, _ = integrate.quad(integrand, lo, np.inf, limit=200, epsabs=0, epsrel=1e-11)
    return v1 * val


def nonlocal_kernel(d: int, alpha: float, delta: float, separations) -> NonlocalKernel:
    """Tabulate ``Phi`` and ``Phi^(delta)`` at positive separations."""
    s = np.asarray(separations, dtype=float)
    if np.any(s <= 0):
        raise ValueError("separations must be positive")
    phi = np.array([_phi_kernel(d, alpha, 0.0, x) for x in s])
    phid = np.array([_phi_kernel(d, alpha, delta, x) for x in s])
    return NonlocalKernel(d, float(alpha), float(delta), s, phi, phid)


# --------------------------------------------------------------------------
# drifts


class Drift(Protocol):
    grid: TorusGrid

    def __call__(self, f: NDArray[np.float64]) -> NDArray[np.float64]: ...

    def linearized(self, f: NDArray[np.float64], z: NDArray[np.float64]) -> NDArray[np.float64]: ...

    def max_dt(self) -> float: ...

    scheme: str


@dataclass(frozen=True)
class CenteringBrownian:
    """``uV_R [ (2R^2/(d+2)) L^(r_N) f - s <F(<f>)>(r_N) ]``."""

    grid: TorusGrid
    params: ScalingParams
    model: Reaction
    moment_matched: bool = False
    scheme: str = "centering-brownian/explicit-euler"

    def __post_init__(self) -> None:
        if self.params.regime is not Regime.BROWNIAN:
            raise ValueError("needs Brownian scaling")
        _check_radius(self.grid, self.params.r_N, "r_N")

    @property
    def _coef(self) -> tuple[float, float, float]:
        p = self.params
        d = self.grid.d
        rho = second_moment_radius(self.grid, p.r_N) if self.moment_matched else p.r_N
        uv = p.u * ball_volume(d, p.R)
        diff = uv * 2 * p.R**2 / (d + 2) * (d + 2) / (2 * rho * rho)
        return uv, diff, uv * p.s

    def __call__(self, f):
        _, diff, sel = self._coef
        spec = _kernel_spectrum(self.grid, self.params.r_N)
        fhat = _rfft(self.grid, f)
        avg = _irfft(self.grid, fhat * spec)
        react = _rfft(self.grid, np.asarray(self.model.F(avg), dtype=float))
        return _irfft(self.grid, diff * fhat * spec * spec - sel * react * spec) - diff * f

    def linearized(self, f, z):
        _, diff, sel = self._coef
        spec = _kernel_spectrum(self.grid, self.params.r_N)
        avg_f = _irfft(self.grid, _rfft(self.grid, f) * spec)
        zhat = _rfft(self.grid, z)
        avg_z = _irfft(self.grid, zhat * spec)
        react = _rfft(self.grid, np.asarray(self.model.dF(avg_f), dtype=float) * avg_z)
        return _irfft(self.grid, diff * zhat * spec * spec - sel * react * spec) - diff * z

    def max_dt(self) -> float:
        p = self.params
        uv = p.u * ball_volume(self.grid.d, p.R)
        return 0.25 * p.r_N**2 / ((self.grid.d + 2) * uv)


@dataclass(frozen=True)
class LimitBrownian:
    """``uV_R [ (R^2/(d+2)) Lap f - s F(f) ]`` with a central-difference Laplacian."""

    grid: TorusGrid
    params: ScalingParams
    model: Reaction
    scheme: str = "limit-brownian/explicit-euler/central-differences"

    def _coef(self):
        p = self.params
        uv = p.u * ball_volume(self.grid.d, p.R)
        return uv * p.R**2 / (self.grid.d + 2), uv * p.s

    def __call__(self, f):
        diff, sel = self._coef()
        return diff * laplacian(self.grid, f) - sel * np.asarray(self.model.F(f), dtype=float)

    def linearized(self, f, z):
        diff, sel = self._coef()
        return diff * laplacian(self.grid, z) - sel * np.asarray(self.model.dF(f), dtype=float) * z

    def max_dt(self) -> float:
        p = self.params
        d = self.grid.d
        uv = p.u * ball_volume(d, p.R)
        return 0.25 * self.grid.h**2 * (d + 2) / (2 * d * uv * p.R**2)


@dataclass(frozen=True)
class CenteringStable:
    """``u [ D^(alpha,delta) f - (s V_1/alpha) F^(delta)(f) ]`` with radii capped at ``r_max``.

    ``r_max`` is in rescaled units. The selection integral omits the tail
    beyond ``r_max`` by default, matching truncated event radii.
    """

    grid: TorusGrid
    params: ScalingParams
    model: Reaction
    r_max: float
    nodes_per_decade: int = 64
    include_tail: bool = False
    scheme: str = "centering-stable/explicit-euler/radial-quadrature"

    def __post_init__(self) -> None:
        if self.params.regime is not Regime.STABLE:
            raise ValueError("needs stable scaling")

    def _quad(self):
        p = self.params
        return radial_quadrature(self.grid, float(p.alpha), float(p.delta), float(self.r_max), int(self.nodes_per_decade))

    def __call__(self, f):
        p = self.params
        D = op_D_alpha_delta(self.grid, f, p.alpha, p.delta, self.r_max, self.nodes_per_decade)
        Fd = F_delta(self.model.F, self.grid, f, p.alpha, p.delta, self.r_max, self.include_tail, self.nodes_per_decade)
        return p.u * (D - p.s * ball_volume(self.grid.d, 1.0) / p.alpha * Fd)

    def linearized(self, f, z):
        p = self.params
        D = op_D_alpha_delta(self.grid, z, p.alpha, p.delta, self.r_max, self.nodes_per_decade)
        quad = self._quad()
        fhat = _rfft(self.grid, f)
        zhat = _rfft(self.grid, z)
        acc = np.zeros(self.grid.shape)
        last = None
        for rho, w in zip(quad.nominal, quad.weights):
            spec = _kernel_spectrum(self.grid, float(rho))
            af = _irfft(self.grid, fhat * spec)
            az = _irfft(self.grid, zhat * spec)
            last = _irfft(self.grid, _rfft(self.grid, np.asarray(self.model.dF(af), dtype=float) * az) * spec)
            acc += w * last
        acc *= p.alpha * p.delta**p.alpha
        if self.include_tail and last is not None:
            acc += (p.delta / self.r_max) ** p.alpha * last
        return p.u * (D - p.s * ball_volume(self.grid.d, 1.0) / p.alpha * acc)

    def max_dt(self) -> float:
        p = self.params
        # |D^(alpha,delta)| <= V_1 delta^-alpha / alpha and |F'| <= 1 on typical models
        return 0.25 * p.alpha * p.delta**p.alpha / (p.u * ball_volume(self.grid.d, 1.0) * (1 + p.s))


@dataclass(frozen=True)
class LimitStable:
    """``u [ D^(alpha) f - (s V_1/alpha) F(f) ]`` with the grid surrogate of ``D^(alpha)``."""

    grid: TorusGrid
    params: ScalingParams
    model: Reaction
    r_max: float
    nodes_per_decade: int = 64
    scheme: str = "limit-stable/explicit-euler/radial-quadrature"

    @property
    def _delta_min(self) -> float:
        return (MIN_CELLS_PER_RADIUS + 0.5) * self.grid.h

    def __call__(self, f):
        p = self.params
        D = op_D_alpha(self.grid, f, p.alpha, self.r_max, self.nodes_per_decade)
        return p.u * (D - p.s * ball_volume(self.grid.d, 1.0) / p.alpha * np.asarray(self.model.F(f), dtype=float))

    def linearized(self, f, z):
        p = self.params
        D = op_D_alpha(self.grid, z, p.alpha, self.r_max, self.nodes_per_decade)
        return p.u * (D - p.s * ball_volume(self.grid.d, 1.0) / p.alpha * np.asarray(self.model.dF(f), dtype=float) * z)

    def max_dt(self) -> float:
        p = self.params
        dm = self._delta_min
        # the core term adds at most V_1 dm^-alpha/(2-alpha)
        bound = ball_volume(self.grid.d, 1.0) * dm**-p.alpha * (1 / p.alpha + 1 / (2 - p.alpha))
        return 0.25 / (p.u * (bound + ball_volume(self.grid.d, 1.0) * p.s / p.alpha))


# --------------------------------------------------------------------------
# time stepping


@dataclass(frozen=True)
class PdeSolution:
    """Solution sampled at ``times`` with solver metadata."""

    grid: TorusGrid
    times: NDArray[np.float64]
    values: NDArray[np.float64]  # shape (K+1, *grid.shape)
    dt: float
    scheme: str
    metadata: dict = field(default_factory=dict)

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of this solution")
        return i

    def at(self, t: float) -> NDArray[np.float64]:
        return self.values[self.index(t)]

    def export(self, directory: str | Path, stem: str = "field") -> Path:
        """Write one snapshot per node and a key-value manifest; returns the manifest path."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        cfg = configparser.ConfigParser()
        cfg["solution"] = {
            "scheme": self.scheme,
            "dt": repr(float(self.dt)),
            "d": str(self.grid.d),
            "n": str(self.grid.n),
            "L": repr(float(self.grid.L)),
            "nodes": str(len(self.times)),
        }
        cfg["metadata"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.metadata.items()}
        files = {}
        for k, (t, vals) in enumerate(zip(self.times, self.values)):
            name = f"{stem}_{k:05d}.bin"
            write_snapshot(out / name, self.grid, vals)
            files[f"{k:05d}"] = f"{float(t)!r} {name}"
        cfg["snapshots"] = files
        path = out / f"{stem}_manifest.ini"
        with open(path, "w") as fh:
            cfg.write(fh)
        return path


def _output_times(T: float, times) -> NDArray[np.float64]:
    if not T > 0:
        raise ValueError("horizon must be positive")
    out = np.linspace(0.0, T, 51) if times is None else np.asarray(times, dtype=float)
    if out[0] != 0.0 or abs(out[-1] - T) > 1e-12 * max(1, T) or np.any(np.diff(out) <= 0):
        raise ValueError("output times must increase from 0 to T")
    return out


def _resolve_dt(drift, dt: float | None) -> float:
    bound = drift.max_dt()
    if dt is None:
        return bound
    if dt > bound * (1 + 1e-12):
        raise InstabilityError(f"dt={dt:.6g} exceeds the stability bound {bound:.6g} of {drift.scheme}")
    return float(dt)


def _check_frequency(f: NDArray[np.float64], t: float, stats: dict) -> NDArray[np.float64]:
    lo = float(f.min())
    hi = float(f.max())
    over = max(-lo, hi - 1.0, 0.0)
    if over > UNSTABLE_OVERSHOOT or not np.isfinite(over):
        raise InstabilityError(f"solution left [0, 1] by {over:.3g} at t={t:.6g}")
    if over > 0.0:
        if over > ROUNDOFF_OVERSHOOT:
            stats["clamped_steps"] = stats.get("clamped_steps", 0) + 1
            stats["max_overshoot"] = max(stats.get("max_overshoot", 0.0), over)
        np.clip(f, 0.0, 1.0, out=f)
    return f


def integrate_forward(drift, w0, T: float, times=None, dt: float | None = None, frequency: bool = True) -> PdeSolution:
    """Explicit Euler for ``df/dt = drift(f)``, landing exactly on output ``times``."""
    grid = drift.grid
    f = np.array(_check_values(grid, w0), dtype=float)
    if frequency and (f.min() < 0 or f.max() > 1):
        raise ValueError("initial values must lie in [0, 1]")
    out_t = _output_times(T, times)
    step = _resolve_dt(drift, dt)
    stats: dict = {}
    values = [f.copy()]
    t = 0.0
    n_steps = 0
    for t_next in out_t[1:]:
        while t < t_next - 1e-14 * max(1.0, t_next):
            h = min(step, t_next - t)
            f = f + h * drift(f)
            t = t_next if h == t_next - t else t + h
            n_steps += 1
            if frequency:
                f = _check_frequency(f, t, stats)
        values.append(f.copy())
    meta = {"steps": n_steps, "stability_bound": drift.max_dt(), **stats}
    return PdeSolution(grid, out_t, np.array(values), step, drift.scheme, meta)


def solve_centering_brownian(
    w0, grid: TorusGrid, params: ScalingParams, model: Reaction, T: float, times=None, dt=None,
    moment_matched: bool = False,
) -> PdeSolution:
    """Centering term ``f^N`` of the fixed-radius regime."""
    return integrate_forward(CenteringBrownian(grid, params, model, moment_matched), w0, T, times, dt)


def solve_centering_stable(
    w0, grid: TorusGrid, params: ScalingParams, model: Reaction, T: float, r_max: float, times=None, dt=None,
    include_tail: bool = False, nodes_per_decade: int = 64,
) -> PdeSolution:
    """Centering term ``f^N`` of the stable regime; ``r_max`` in rescaled units."""
    drift = CenteringStable(grid, params, model, r_max, nodes_per_decade, include_tail)
    return integrate_forward(drift, w0, T, times, dt)


def solve_limit_pde(
    w0, grid: TorusGrid, params: ScalingParams, model: Reaction, T: float, times=None, dt=None,
    r_max: float | None = None, nodes_per_decade: int = 64,
) -> PdeSolution:
    """Limit equation of either regime, chosen by ``params.regime``."""
    if params.regime is Regime.BROWNIAN:
        drift = LimitBrownian(grid, params, model)
    else:
        drift = LimitStable(grid, params, model, r_max if r_max is not None else grid.L / 4 * 0.999, nodes_per_decade)
    return integrate_forward(drift, w0, T, times, dt)


# --------------------------------------------------------------------------
# backward test functions


@dataclass(frozen=True)
class BackwardSolution:
    """Test function ``phi(., s, t)`` at the nodes ``s`` of a forward solution, for fixed ``t``."""

    grid: TorusGrid
    times: NDArray[np.float64]
    values: NDArray[np.float64]
    t: float
    scheme: str

    def at(self, s: float) -> NDArray[np.float64]:
        i = int(np.argmin(np.abs(self.times - s)))
        if abs(self.times[i] - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"time {s} is not a node")
        return self.values[i]


def backward_testfn(drift, phi: TestFunction | NDArray[np.float64], forward: PdeSolution, t: float) -> BackwardSolution:
    """Solve ``d_s phi + A(f_s)^T phi = 0`` on ``[0, t]`` with ``phi(t) = phi``.

    ``A(f)`` is the linearized drift, which is self-adjoint in the
    ``h^d`` pairing, so each backward Euler-in-reverse step is the exact
    adjoint of the forward linearized step ``z -> z + dt A(f_s) z`` taken
    from the left node ``s``. Intervals longer than the stability bound are
    subdivided with ``f`` held at the left node.
    """
    grid = drift.grid
    vals = phi.values if isinstance(phi, TestFunction) else _check_values(grid, phi)
    if forward.grid != grid:
        raise GridMismatchError("forward solution lives on another grid")
    k_end = forward.index(t)
    bound = drift.max_dt()
    p = np.array(vals, dtype=float)
    out = [p.copy()]
    for k in range(k_end, 0, -1):
        s0, s1 = forward.times[k - 1], forward.times[k]
        n_sub = max(1, int(np.ceil((s1 - s0) / bound - 1e-12)))
        h = (s1 - s0) / n_sub
        f = forward.values[k - 1]
        for _ in range(n_sub):
            p = p + h * drift.linearized(f, p)
        if not np.all(np.isfinite(p)):
            raise InstabilityError(f"backward solution blew up at s={s0:.6g}")
        out.append(p.copy())
    out.reverse()
    return BackwardSolution(grid, forward.times[: k_end + 1].copy(), np.array(out), float(t), drift.scheme)


@dataclass(frozen=True)
class BackwardPair:
    """Discrete ``phi^N`` and continuum ``phi`` for the same terminal data."""

    phi_N: BackwardSolution | None
    phi: BackwardSolution | None


def solve_backward_testfn(
    phi: TestFunction,
    params: ScalingParams,
    model: Reaction,
    t: float,
    centering: PdeSolution | None = None,
    limit: PdeSolution | None = None,
    r_max: float | None = None,
    moment_matched: bool = False,
) -> BackwardPair:
    """Backward test functions for the centering equation, the limit equation or both."""
    grid = phi.grid
    phi_N = phi_c = None
    if params.regime is Regime.BROWNIAN:
        if centering is not None:
            phi_N = backward_testfn(CenteringBrownian(grid, params, model, moment_matched), phi, centering, t)
        if limit is not None:
            phi_c = backward_testfn(LimitBrownian(grid, params, model), phi, limit, t)
    else:
        rm = r_max if r_max is not None else grid.L / 4 * 0.999
        if centering is not None:
            phi_N = backward_testfn(CenteringStable(grid, params, model, rm), phi, centering, t)
        if limit is not None:
            phi_c = backward_testfn(LimitStable(grid, params, model, rm), phi, limit, t)
    return BackwardPair(phi_N, phi_c)


# --------------------------------------------------------------------------
# compound-Poisson semigroup


def levy_semigroup_apply(grid: TorusGrid, values, r: float, t: float) -> NDArray[np.float64]:
    """``G^(r)_t * phi`` for the jump process generated by ``L^(r)``.

    Jumps arrive at rate ``lam = (d+2)/(2 r^2)`` with the double-ball
    displacement law, so ``G_t * phi = sum_n P[N_t = n] psi^{*n} * phi``
    with ``N_t`` Poisson(``lam t``). The ``n = 0`` atom is kept exactly and
    the series is cut once the remaining Poisson mass is below 1e-12. Each
    convolution power acts in Fourier space as a power of the squared
    stencil transform.
    """
    values = _check_values(grid, values)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return values.copy()
    _check_radius(grid, r)
    lam_t = (grid.d + 2) / (2 * r * r) * t
    n_max = int(poisson.isf(POISSON_TAIL, lam_t)) + 1
    ns = np.arange(n_max + 1)
    weights = poisson.pmf(ns, lam_t)
    spec = _kernel_spectrum(grid, r)
    psi = spec * spec
    vhat = _rfft(grid, values)
    acc = np.zeros_like(vhat)
    power = np.ones_like(psi)
    for w in weights:
        acc += w * power * vhat
        power = power * psi
    return _irfft(grid, acc)


def f_of_t(grid: TorusGrid, phi, t: float, r: float = 1.0) -> float:
    """``|| <G^(r)_t * phi>(r) ||_2^2``."""
    vals = phi.values if isinstance(phi, TestFunction) else phi
    g = levy_semigroup_apply(grid, vals, r, t)
    avg = ball_average_values(grid, g, r)
    return float(np.sum(avg * avg) * grid.cell_volume)


__all__ = [
    "BackwardPair",
    "BackwardSolution",
    "CenteringBrownian",
    "CenteringStable",
    "D_alpha_tail_rate",
    "F_delta",
    "FunctionReaction",
    "LimitBrownian",
    "LimitStable",
    "NonlocalKernel",
    "PdeSolution",
    "RadialQuadrature",
    "backward_testfn",
    "f_of_t",
    "integrate_forward",
    "laplacian",
    "levy_semigroup_apply",
    "nonlocal_kernel",
    "op_D_alpha",
    "op_D_alpha_delta",
    "op_L_r",
    "quadrature_self_check",
    "radial_quadrature",
    "second_moment_radius",
    "solve_backward_testfn",
    "solve_centering_brownian",
    "solve_centering_stable",
    "solve_limit_pde",
]
