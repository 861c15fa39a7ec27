"""Exception types shared across the package."""

from __future__ import annotations


class ResolutionError(ValueError):
    """A radius is too small for the grid it is applied on."""


class GridMismatchError(ValueError):
    """Two fields or test functions live on different grids."""


class InstabilityError(RuntimeError):
    """An explicit time stepper left the admissible range of values."""


class ConfigError(ValueError):
    """A configuration document failed validation.

    Parameters
    ----------
    problems : list of (key, reason)
        Every problem found, not only the first one.
    """

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        msg = "; ".join(f"{key}: {reason}" for key, reason in self.problems)
        super().__init__(msg)


class ReplayError(RuntimeError):
    """An event log cannot be replayed against the given configuration."""
