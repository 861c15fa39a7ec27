"""Selection mechanisms and reproduction-event laws."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from itertools import product
from math import comb

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import bisect

from .lattice import TorusGrid


class EventKind(IntEnum):
    NEUTRAL = 0
    SELECTIVE = 1  # haploid selective, or diploid selection against A1 homozygotes
    SELECTIVE_2 = 2  # diploid selection against A2 homozygotes
    MUTATION_1 = 3  # offspring forced to A2A2
    MUTATION_2 = 4  # offspring forced to A1A1


N_KINDS = 5

MODEL_HAPLOID = 0
MODEL_DIPLOID = 1


@dataclass(frozen=True)
class GeneralF:
    """Haploid selection through ``m`` sampled parents.

    ``p[b]`` is the probability that the offspring is of the tracked type
    given parent types encoded in the bits of ``b`` (bit ``i`` set when
    parent ``i`` carries the tracked type). The induced selection function
    is ``F(w) = w - E[p(B)]`` with ``B`` made of ``m`` independent
    Bernoulli(w) bits. If ``F_coeffs`` (ascending polynomial coefficients)
    are supplied they must agree with that identity.
    """

    m: int
    p: tuple[float, ...]
    F_coeffs: tuple[float, ...] | None = None

    haploid = True

    def __post_init__(self) -> None:
        if not 1 <= self.m <= 7:
            raise ValueError("m must lie in 1..7 (the event kernel holds 2m+1 uniforms)")
        p = tuple(float(v) for v in self.p)
        if len(p) != 2**self.m:
            raise ValueError(f"p must have 2**m = {2**self.m} entries")
        if any(v < 0 or v > 1 for v in p):
            raise ValueError("p values must lie in [0, 1]")
        object.__setattr__(self, "p", p)
        if self.F_coeffs is not None:
            w = np.linspace(0.0, 1.0, 101)
            mismatch = np.max(np.abs(np.polynomial.polynomial.polyval(w, self.F_coeffs) - self._F_from_p(w)))
            if mismatch > 1e-12:
                raise ValueError(f"F coefficients disagree with w - E[p] (max gap {mismatch:.3g})")

    def _F_from_p(self, w):
        w = np.asarray(w, dtype=float)
        mean_p = np.zeros_like(w)
        for bits in range(2**self.m):
            k = bin(bits).count("1")
            mean_p = mean_p + self.p[bits] * w**k * (1 - w) ** (self.m - k)
        return w - mean_p

    def F(self, w):
        return self._F_from_p(w)

    def dF(self, w):
        w = np.asarray(w, dtype=float)
        out = np.ones_like(w)
        for bits in range(2**self.m):
            k = bin(bits).count("1")
            j = self.m - k
            term = np.zeros_like(w)
            if k:
                term = term + k * w ** (k - 1) * (1 - w) ** j
            if j:
                term = term - j * w**k * (1 - w) ** (j - 1)
            out = out - self.p[bits] * term
        return out

    @property
    def p_table(self) -> NDArray[np.float64]:
        return np.array(self.p, dtype=float)

    @property
    def model_code(self) -> int:
        return MODEL_HAPLOID


@dataclass(frozen=True)
class Genic(GeneralF):
    """Offspring is of the tracked type only if both of two parents are: ``F(w) = w(1-w)``."""

    m: int = 2
    p: tuple[float, ...] = (0.0, 0.0, 0.0, 1.0)
    F_coeffs: tuple[float, ...] | None = (0.0, 1.0, -1.0)

    def F(self, w):
        w = np.asarray(w, dtype=float)
        return w * (1 - w)

    def dF(self, w):
        return 1 - 2 * np.asarray(w, dtype=float)


@dataclass(frozen=True)
class Overdominance:
    """Diploid selection favouring heterozygotes, with two-way mutation.

    The tracked frequency is that of allele A1. Event weights ``s1``, ``s2``
    (selection against A1A1 and A2A2 homozygotes) and ``nu1``, ``nu2``
    (mutation producing A2A2 and A1A1 offspring) are absolute probabilities
    per event. The selection function only depends on their ratios.
    """

    s1: float
    s2: float
    nu1: float = 0.0
    nu2: float = 0.0

    haploid = False

    def __post_init__(self) -> None:
        vals = (self.s1, self.s2, self.nu1, self.nu2)
        if any(v < 0 for v in vals):
            raise ValueError("selection and mutation weights must be nonnegative")
        if self.s1 + self.s2 <= 0:
            raise ValueError("s1 + s2 must be positive")
        if sum(vals) >= 1:
            raise ValueError("s1 + s2 + nu1 + nu2 must be below 1")

    @property
    def s(self) -> float:
        return self.s1 + self.s2

    def F(self, w):
        w = np.asarray(w, dtype=float)
        s = self.s
        return w * (1 - w) * (w - self.s2 / s) + self.nu1 / s * w - self.nu2 / s * (1 - w)

    def dF(self, w):
        w = np.asarray(w, dtype=float)
        s = self.s
        theta = self.s2 / s
        # d/dw [w(1-w)(w - theta)] = -3w^2 + 2(1+theta)w - theta
        return -3 * w**2 + 2 * (1 + theta) * w - theta + (self.nu1 + self.nu2) / s

    def scaled(self, factor: float) -> "Overdominance":
        """Same selection function with every event weight multiplied by ``factor``."""
        return Overdominance(self.s1 * factor, self.s2 * factor, self.nu1 * factor, self.nu2 * factor)

    def same_mechanism(self, other: "Overdominance") -> bool:
        """True when both models have proportional weights (hence equal F)."""
        a = np.array([self.s1, self.s2, self.nu1, self.nu2]) / self.s
        b = np.array([other.s1, other.s2, other.nu1, other.nu2]) / other.s
        return bool(np.allclose(a, b, rtol=1e-12, atol=1e-15))

    @property
    def p_table(self) -> NDArray[np.float64]:
        return np.zeros(1)

    @property
    def m(self) -> int:
        return 4

    @property
    def model_code(self) -> int:
        return MODEL_DIPLOID


SelectionModel = GeneralF | Genic | Overdominance


def equilibrium_lambda(s1: float, s2: float, nu1: float = 0.0, nu2: float = 0.0, xtol: float = 1e-12) -> float:
    """Interior root of the overdominance selection function, by bisection.

    Without mutation the cubic factors and the root ``s2/(s1+s2)`` is
    returned exactly.
    """
    model = Overdominance(s1, s2, nu1, nu2)
    if nu1 == 0.0 and nu2 == 0.0:
        theta = s2 / (s1 + s2)
        if 0.0 < theta < 1.0:
            return theta
        raise ValueError("no interior equilibrium: one of s1, s2 is zero")
    w = np.linspace(0.0, 1.0, 4097)[1:-1]
    vals = model.F(w)
    change = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
    # Keep the stable root, where F crosses zero upward.
    change = [i for i in change if vals[i + 1] >= vals[i]]
    if not change:
        raise ValueError("selection function has no interior sign change")
    i = change[0]
    return float(bisect(lambda x: float(model.F(x)), w[i], w[i + 1], xtol=xtol, maxiter=200))


@dataclass(frozen=True)
class FixedRadius:
    """Every event has radius ``R``."""

    R: float

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise ValueError("radius must be positive")

    def total_mass(self, d: int) -> float:
        return 1.0

    def truncated_mass(self, d: int) -> float:
        return 0.0

    @property
    def max_radius(self) -> float:
        return self.R

    def inverse_cdf(self, U, d: int):
        return np.full_like(np.asarray(U, dtype=float), self.R)


@dataclass(frozen=True)
class StablePareto:
    """Radius density proportional to ``r^-(d+alpha+1)`` on ``[1, r_max]``."""

    alpha: float
    r_max: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.r_max > 1:
            raise ValueError("r_max must exceed 1")

    def total_mass(self, d: int) -> float:
        b = d + self.alpha
        tail = 0.0 if np.isinf(self.r_max) else self.r_max**-b
        return (1.0 - tail) / b

    def truncated_mass(self, d: int) -> float:
        """Mass of the untruncated law beyond ``r_max``."""
        b = d + self.alpha
        return 0.0 if np.isinf(self.r_max) else self.r_max**-b / b

    @property
    def max_radius(self) -> float:
        return self.r_max

    def inverse_cdf(self, U, d: int):
        b = d + self.alpha
        tail = 0.0 if np.isinf(self.r_max) else self.r_max**-b
        return (1.0 - np.asarray(U, dtype=float) * (1.0 - tail)) ** (-1.0 / b)


RadiusLaw = FixedRadius | StablePareto


@dataclass(frozen=True)
class EventLaw:
    """Impact, radius law and haploid selective weight of reproduction events.

    For diploid models the selective and mutation weights are carried by
    the :class:`Overdominance` instance and ``s`` must stay 0.
    """

    u: float
    radius: FixedRadius | StablePareto
    s: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.u <= 1.0:
            raise ValueError("impact u must lie in [0, 1]")
        if not 0.0 <= self.s < 1.0:
            raise ValueError("selective weight s must lie in [0, 1)")

    def validate(self, d: int, model: GeneralF | Overdominance | None = None) -> None:
        if isinstance(self.radius, StablePareto) and not (0 < self.radius.alpha < min(2, d)):
            raise ValueError("alpha must lie in (0, min(2,d))")
        if model is not None and not model.haploid and self.s != 0.0:
            raise ValueError("diploid event weights come from the model; set law.s = 0")

    def kind_weights(self, model: GeneralF | Overdominance) -> NDArray[np.float64]:
        w = np.zeros(N_KINDS)
        if model.haploid:
            w[EventKind.SELECTIVE] = self.s
        else:
            w[EventKind.SELECTIVE] = model.s1
            w[EventKind.SELECTIVE_2] = model.s2
            w[EventKind.MUTATION_1] = model.nu1
            w[EventKind.MUTATION_2] = model.nu2
        w[EventKind.NEUTRAL] = 1.0 - w[1:].sum()
        return w

    def total_selection(self, model: GeneralF | Overdominance) -> float:
        return self.s if model.haploid else model.s


def total_event_rate(law: EventLaw, grid: TorusGrid) -> float:
    """Events per unit time on the whole torus: ``L^d`` times the radius-law mass."""
    return grid.L**grid.d * law.radius.total_mass(grid.d)


def sample_radius(law: EventLaw, rng: np.random.Generator, d: int) -> float:
    """One radius from the event law."""
    return float(law.radius.inverse_cdf(rng.random(), d))


def uniforms_per_kind(model: GeneralF | Overdominance) -> NDArray[np.int64]:
    """Number of parent-sampling uniforms each event kind consumes."""
    out = np.zeros(N_KINDS, dtype=np.int64)
    if model.haploid:
        out[EventKind.NEUTRAL] = 2
        out[EventKind.SELECTIVE] = 2 * model.m + 1
    else:
        out[EventKind.NEUTRAL] = 4
        out[EventKind.SELECTIVE] = 9
        out[EventKind.SELECTIVE_2] = 9
    return out


def offspring_distribution(model: GeneralF | Overdominance, kind: EventKind, w: float) -> dict[float, float]:
    """Exact law of the update target on a constant field ``w``, by enumeration.

    Returns a map from target value to probability.
    """
    dist: dict[float, float] = {}

    def add(value: float, prob: float) -> None:
        dist[value] = dist.get(value, 0.0) + prob

    if model.haploid:
        if kind == EventKind.NEUTRAL:
            add(1.0, w)
            add(0.0, 1 - w)
        elif kind == EventKind.SELECTIVE:
            for bits in range(2**model.m):
                k = bin(bits).count("1")
                prob = w**k * (1 - w) ** (model.m - k)
                add(1.0, prob * model.p[bits])
                add(0.0, prob * (1 - model.p[bits]))
        else:
            raise ValueError(f"haploid models have no {kind.name} events")
        return dist
    if kind == EventKind.NEUTRAL:
        for k in range(3):
            add(k / 2, comb(2, k) * w**k * (1 - w) ** (2 - k))
    elif kind in (EventKind.SELECTIVE, EventKind.SELECTIVE_2):
        bad = 1 if kind == EventKind.SELECTIVE else 0
        for types in product((0, 1), repeat=4):
            prob = np.prod([w if t else 1 - w for t in types])
            p1, p2 = types[:2], types[2:]
            bad1 = p1[0] == bad and p1[1] == bad
            bad2 = p2[0] == bad and p2[1] == bad
            if bad1 and not bad2:
                add(sum(p2) / 2, prob)
            elif bad2 and not bad1:
                add(sum(p1) / 2, prob)
            else:
                add(sum(p1) / 2, prob / 2)
                add(sum(p2) / 2, prob / 2)
    elif kind == EventKind.MUTATION_1:
        add(0.0, 1.0)
    elif kind == EventKind.MUTATION_2:
        add(1.0, 1.0)
    return dist
