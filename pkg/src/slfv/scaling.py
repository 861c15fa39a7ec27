"""Parameter sequences indexed by N and the space/time rescaling maps."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Regime(str, Enum):
    BROWNIAN = "brownian"
    STABLE = "stable"


@dataclass(frozen=True)
class ScalingParams:
    """Scaling of impact, selection, radius, time and noise for one value of N.

    Parameters
    ----------
    eps, delta : float
        Impact and space scale factors, both in (0, 1].
    u, s : float
        Base impact and base selection weight.
    d : int
        Spatial dimension.
    regime : Regime
        Fixed-radius (Brownian) or heavy-tailed (stable) reproduction radii.
    R : float
        Fixed radius in raw units (Brownian regime).
    alpha : float
        Tail index of the radius law (stable regime).
    """

    eps: float
    delta: float
    u: float
    s: float
    d: int
    regime: Regime = Regime.BROWNIAN
    R: float = 1.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.eps <= 1 and 0 < self.delta <= 1):
            raise ValueError("eps and delta must lie in (0, 1]")
        if self.d not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {self.d}")
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.regime is Regime.STABLE and not (0 < self.alpha < min(2, self.d)):
            raise ValueError("alpha must lie in (0, min(2,d))")

    @property
    def space_power(self) -> float:
        """Exponent of delta in the time and selection scalings."""
        return 2.0 if self.regime is Regime.BROWNIAN else self.alpha

    @property
    def u_N(self) -> float:
        return self.eps * self.u

    @property
    def s_N(self) -> float:
        return self.delta**self.space_power * self.s

    @property
    def selection_factor(self) -> float:
        """Factor applied to every non-neutral event weight."""
        return self.delta**self.space_power

    @property
    def r_N(self) -> float:
        """Reproduction radius in rescaled space (Brownian regime)."""
        return self.delta * self.R

    @property
    def eta(self) -> float:
        """Raw time elapsed per unit of rescaled time is ``1/eta``."""
        return self.eps * self.delta**self.space_power

    @property
    def tau(self) -> float:
        if self.regime is Regime.BROWNIAN:
            return self.eps**2 * self.delta**self.d
        return self.eps**2 * self.delta**self.alpha

    @property
    def fluctuation_scale(self) -> float:
        """Multiplier turning ``q - f`` into the fluctuation field, ``sqrt(eta/tau)``."""
        return (self.eta / self.tau) ** 0.5

    def raw_time(self, t_rescaled: float) -> float:
        return t_rescaled / self.eta

    def rescaled_time(self, t_raw: float) -> float:
        return t_raw * self.eta

    def noise_ratio_small(self) -> float:
        """``(tau/eta) / delta^(2d)`` in the Brownian regime, ``eps / delta^(2 alpha)`` in the stable one.

        Both should be small for the deterministic limit to apply.
        """
        if self.regime is Regime.BROWNIAN:
            return (self.tau / self.eta) / self.delta ** (2 * self.d)
        return self.eps / self.delta ** (2 * self.alpha)
