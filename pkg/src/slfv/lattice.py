"""Torus geometry, ball kernels and the discrete frequency-field state.

Fields are stored as cell values on a periodic grid of ``n**d`` cells of
width ``h = L/n``. Cell ``i`` has its center at ``(i + 1/2) h`` along each
axis. A ball of radius ``r`` around a cell contains every cell whose center
lies strictly within distance ``r`` (cell-center rule, no partial weights).

In one dimension the cell-center ball has volume exactly ``2r`` whenever
``r/h`` is a half-integer, which removes the leading O(h/r) error in all
ball moments. :func:`fit_grid` builds grids with that property.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from math import gamma, pi
from pathlib import Path

import numpy as np
import scipy.fft
from numpy.typing import NDArray

from .errors import GridMismatchError, ResolutionError

SNAPSHOT_MAGIC = b"SLFV"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIIdQ")

#: Minimum ratio r/h accepted by operators that rely on ball moments.
MIN_CELLS_PER_RADIUS = 8.0


@dataclass(frozen=True)
class TorusGrid:
    """Periodic grid ``[0, L)^d`` split into ``n`` cells per side."""

    d: int
    L: float
    n: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {self.d}")
        if self.n < 4:
            raise ValueError("a torus grid needs n >= 4 cells per side")
        if not self.L > 0:
            raise ValueError("side length must be positive")

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def centers(self) -> NDArray[np.float64]:
        """1D array of cell-center coordinates along one axis."""
        return (np.arange(self.n) + 0.5) * self.h

    def coordinates(self) -> list[NDArray[np.float64]]:
        """Cell-center coordinates as ``d`` broadcastable arrays."""
        return list(np.meshgrid(*([self.centers()] * self.d), indexing="ij"))

    def torus_distance_from(self, point) -> NDArray[np.float64]:
        """Minimal-image distance from every cell center to ``point``."""
        point = np.broadcast_to(np.asarray(point, dtype=float), (self.d,))
        sq = np.zeros(self.shape)
        for axis, coord in enumerate(self.coordinates()):
            diff = np.abs(coord - point[axis]) % self.L
            diff = np.minimum(diff, self.L - diff)
            sq += diff**2
        return np.sqrt(sq)

    def scaled(self, factor: float) -> "TorusGrid":
        """Same cells with every length multiplied by ``factor``."""
        return TorusGrid(self.d, self.L * factor, self.n)


def fit_grid(d: int, length: float, radius: float, cells_per_radius: float = 8.5) -> TorusGrid:
    """Grid of side close to ``length`` on which ``radius/h`` equals ``cells_per_radius``.

    The side is adjusted to an exact multiple of the resulting cell width.
    Use a half-integer ``cells_per_radius`` in one dimension so that the
    discrete ball has volume exactly ``2 * radius``.
    """
    if cells_per_radius < MIN_CELLS_PER_RADIUS:
        raise ResolutionError(f"cells_per_radius={cells_per_radius} is below {MIN_CELLS_PER_RADIUS}")
    h = radius / cells_per_radius
    n = max(4, int(round(length / h)))
    return TorusGrid(d, n * h, n)


def ball_volume(d: int, r: float) -> float:
    """Volume of the Euclidean ball of radius ``r`` in ``d`` dimensions."""
    if d not in (1, 2, 3):
        raise ValueError(f"unsupported dimension {d}")
    if r <= 0:
        raise ValueError("radius must be positive")
    return pi ** (d / 2) / gamma(d / 2 + 1) * r**d


def ball_overlap_volume(d: int, r: float, dist: float) -> float:
    """Volume of the intersection of two radius-``r`` balls ``dist`` apart."""
    if r <= 0 or dist < 0:
        raise ValueError("need r > 0 and dist >= 0")
    if dist >= 2 * r:
        return 0.0
    if d == 1:
        return 2 * r - dist
    if d == 2:
        return 2 * r * r * np.arccos(dist / (2 * r)) - 0.5 * dist * np.sqrt(4 * r * r - dist * dist)
    if d == 3:
        return pi * (4 * r + dist) * (2 * r - dist) ** 2 / 12
    raise ValueError(f"unsupported dimension {d}")


def ball_overlap_volume_array(d: int, r: float, dist: NDArray[np.float64]) -> NDArray[np.float64]:
    """Vectorized :func:`ball_overlap_volume`."""
    dist = np.asarray(dist, dtype=float)
    x = np.clip(dist, 0.0, 2 * r)
    if d == 1:
        out = 2 * r - x
    elif d == 2:
        out = 2 * r * r * np.arccos(x / (2 * r)) - 0.5 * x * np.sqrt(np.maximum(4 * r * r - x * x, 0.0))
    elif d == 3:
        out = pi * (4 * r + x) * (2 * r - x) ** 2 / 12
    else:
        raise ValueError(f"unsupported dimension {d}")
    return np.where(dist >= 2 * r, 0.0, out)


@dataclass(frozen=True)
class BallKernel:
    """Cell offsets whose centers lie strictly inside a ball around a cell center."""

    grid: TorusGrid
    r: float
    offsets: NDArray[np.int64] = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def volume(self) -> float:
        """Discrete ball volume ``h^d * count``."""
        return self.count * self.grid.cell_volume

    @property
    def equivalent_radius(self) -> float:
        """Radius of the continuum ball with the same volume as this stencil."""
        return (self.volume / ball_volume(self.grid.d, 1.0)) ** (1.0 / self.grid.d)

    def periodic_weights(self) -> NDArray[np.float64]:
        """Normalized stencil laid out on the torus with wraparound."""
        w = np.zeros(self.grid.shape)
        idx = tuple((self.offsets % self.grid.n).T)
        np.add.at(w, idx, 1.0 / self.count)
        return w


@lru_cache(maxsize=512)
def ball_kernel(grid: TorusGrid, r: float) -> BallKernel:
    """Cell-center stencil of radius ``r`` on ``grid``."""
    if r < grid.h:
        raise ResolutionError(f"radius {r} is below the cell width {grid.h}")
    kmax = int(np.ceil(r / grid.h))
    k = np.arange(-kmax, kmax + 1)
    mesh = np.stack(np.meshgrid(*([k] * grid.d), indexing="ij"), axis=-1).reshape(-1, grid.d)
    inside = np.sum((mesh * grid.h) ** 2, axis=1) < r * r
    offsets = mesh[inside].astype(np.int64)
    if len(offsets) == 0:
        raise ResolutionError(f"ball of radius {r} contains no cell")
    return BallKernel(grid, float(r), offsets)


def equivalent_radius(grid: TorusGrid, r: float) -> float:
    """Volume-equivalent radius of the discrete ball of nominal radius ``r``."""
    return ball_kernel(grid, r).equivalent_radius


@lru_cache(maxsize=512)
def _kernel_spectrum(grid: TorusGrid, r: float) -> NDArray[np.float64]:
    w = ball_kernel(grid, r).periodic_weights()
    # The stencil is point-symmetric, so its transform is real up to roundoff.
    spec = scipy.fft.rfftn(w).real
    spec.setflags(write=False)
    return spec


def _convolve(grid: TorusGrid, values: NDArray[np.float64], spectrum: NDArray[np.float64]) -> NDArray[np.float64]:
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise GridMismatchError(f"values of shape {values.shape} do not match grid {grid.shape}")
    out = scipy.fft.irfftn(scipy.fft.rfftn(values) * spectrum, s=grid.shape)
    return out


def ball_average_values(grid: TorusGrid, values: NDArray[np.float64], r: float) -> NDArray[np.float64]:
    """Mean of ``values`` over the cell-center ball of radius ``r`` around every cell."""
    return _convolve(grid, values, _kernel_spectrum(grid, r))


def double_ball_average_values(grid: TorusGrid, values: NDArray[np.float64], r: float) -> NDArray[np.float64]:
    """Ball average applied twice, computed as one convolution."""
    spec = _kernel_spectrum(grid, r)
    return _convolve(grid, values, spec * spec)


def pair_values(grid: TorusGrid, a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    """Cell-volume weighted inner product."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != grid.shape or b.shape != grid.shape:
        raise GridMismatchError("pairing arguments do not match the grid")
    return float(np.sum(a * b) * grid.cell_volume)


@dataclass(frozen=True)
class FrequencyField:
    """Allele frequency per cell, every value in [0, 1]."""

    grid: TorusGrid
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise GridMismatchError(f"values of shape {vals.shape} do not match grid {self.grid.shape}")
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("frequency values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: TorusGrid, w: float) -> "FrequencyField":
        return cls(grid, np.full(grid.shape, float(w)))

    def ball_average(self, r: float) -> "FrequencyField":
        return FrequencyField(self.grid, np.clip(ball_average_values(self.grid, self.values, r), 0.0, 1.0))

    def double_ball_average(self, r: float) -> "FrequencyField":
        return FrequencyField(self.grid, np.clip(double_ball_average_values(self.grid, self.values, r), 0.0, 1.0))


@dataclass(frozen=True)
class TestFunction:
    """Grid-sampled test function with its norms."""

    __test__ = False  # not a pytest class

    grid: TorusGrid
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise GridMismatchError(f"values of shape {vals.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("test function values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def norm1(self) -> float:
        return float(np.sum(np.abs(self.values)) * self.grid.cell_volume)

    @property
    def norm2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2) * self.grid.cell_volume))

    @property
    def norm_inf(self) -> float:
        return float(np.max(np.abs(self.values)))

    @classmethod
    def gaussian(cls, grid: TorusGrid, center, width: float, mass: float = 1.0) -> "TestFunction":
        """Gaussian bump with standard deviation ``width`` and continuum mass ``mass``."""
        dist = grid.torus_distance_from(center)
        norm = (2 * pi * width**2) ** (grid.d / 2)
        return cls(grid, mass * np.exp(-0.5 * (dist / width) ** 2) / norm)


def ball_average(field: FrequencyField | TestFunction, r: float):
    """Ball average of a field or test function, returning the same type."""
    if isinstance(field, FrequencyField):
        return field.ball_average(r)
    return TestFunction(field.grid, ball_average_values(field.grid, field.values, r))


def double_ball_average(field: FrequencyField | TestFunction, r: float):
    """Double ball average of a field or test function, returning the same type."""
    if isinstance(field, FrequencyField):
        return field.double_ball_average(r)
    return TestFunction(field.grid, double_ball_average_values(field.grid, field.values, r))


def pair(field: FrequencyField | TestFunction, phi: TestFunction) -> float:
    """``<field, phi>`` as an ``h^d``-weighted sum."""
    if field.grid != phi.grid:
        raise GridMismatchError("field and test function live on different grids")
    return pair_values(field.grid, field.values, phi.values)


def _kronecker_point(n: int, d: int) -> NDArray[np.float64]:
    # Additive recurrence with the generalized golden ratio: well spread centers.
    phi_d = 2.0
    for _ in range(64):
        phi_d = (1 + phi_d) ** (1.0 / (d + 1))
    alpha = np.array([phi_d ** -(k + 1) for k in range(d)])
    return (0.5 + n * alpha) % 1.0


@dataclass(frozen=True)
class XiMetricFamily:
    """Raised-cosine bumps at dyadic widths and spread-out centers.

    Bump ``n`` (1-based) has half-width ``L * 2**-(level + 1)`` with
    ``level = floor(log2 n)`` and is normalized to unit mass on the grid.
    """

    grid: TorusGrid
    n_max: int = 16
    bumps: tuple[NDArray[np.float64], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError("empty test-function family")
        bumps = []
        for n in range(1, self.n_max + 1):
            level = int(np.floor(np.log2(n)))
            half_width = max(self.grid.L * 2.0 ** -(level + 1), 2 * self.grid.h)
            center = _kronecker_point(n, self.grid.d) * self.grid.L
            dist = self.grid.torus_distance_from(center)
            b = np.where(dist < half_width, 0.5 * (1 + np.cos(pi * dist / half_width)), 0.0)
            b /= np.sum(b) * self.grid.cell_volume
            b.setflags(write=False)
            bumps.append(b)
        object.__setattr__(self, "bumps", tuple(bumps))

    def pairings(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.array([pair_values(self.grid, values, b) for b in self.bumps])

    def norms1(self) -> NDArray[np.float64]:
        return np.array([np.sum(np.abs(b)) * self.grid.cell_volume for b in self.bumps])


def xi_distance_values(fam: XiMetricFamily, f: NDArray[np.float64], g: NDArray[np.float64]) -> float:
    """``sum_n 2^-n |<f - g, phi_n>|`` over the family."""
    diff = np.asarray(f, dtype=float) - np.asarray(g, dtype=float)
    weights = 2.0 ** -np.arange(1, fam.n_max + 1)
    return float(np.sum(weights * np.abs(fam.pairings(diff))))


def xi_distance(f: FrequencyField, g: FrequencyField, fam: XiMetricFamily) -> float:
    """Distance between two fields in the vague-topology metric of the family."""
    if f.grid != g.grid or f.grid != fam.grid:
        raise GridMismatchError("fields and family live on different grids")
    return xi_distance_values(fam, f.values, g.values)


def write_snapshot(path: str | Path, grid: TorusGrid, values: NDArray[np.float64]) -> None:
    """Write a field snapshot: header then row-major little-endian float64 values."""
    vals = np.ascontiguousarray(values, dtype="<f8")
    if vals.shape != grid.shape:
        raise GridMismatchError("snapshot values do not match the grid")
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, grid.d, grid.n, grid.L, vals.size))
        fh.write(vals.tobytes(order="C"))


def read_snapshot(path: str | Path) -> tuple[TorusGrid, NDArray[np.float64]]:
    """Inverse of :func:`write_snapshot`."""
    data = Path(path).read_bytes()
    if len(data) < _SNAPSHOT_HEADER.size:
        raise ValueError(f"{path}: truncated snapshot header")
    magic, version, d, n, L, count = _SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    grid = TorusGrid(d, L, n)
    if count != grid.size or len(data) != _SNAPSHOT_HEADER.size + 8 * count:
        raise ValueError(f"{path}: payload size does not match header")
    vals = np.frombuffer(data, dtype="<f8", offset=_SNAPSHOT_HEADER.size).reshape(grid.shape).astype(float)
    return grid, vals
