"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`ZvonkinError`
so callers (and the CLI) can map failures onto stable exit codes.
"""

from __future__ import annotations


class ZvonkinError(Exception):
    """Base class for all package errors."""


class InputError(ZvonkinError, ValueError):
    """Malformed input: wrong dimension, non-positive tolerance, bad expression."""


class ConfigError(InputError):
    """Configuration file could not be parsed or is inconsistent."""


class TransformBuildError(ZvonkinError):
    """Quadrature of the transform did not reach the requested tolerance."""


class ChartBuildError(ZvonkinError):
    """No radius could be certified for a chart."""


class ChartExitError(ZvonkinError):
    """A point lies outside the validity ball of a chart."""


class InversionError(ZvonkinError):
    """Newton inversion of a map did not converge."""


class SurfaceError(ZvonkinError):
    """The first-coordinate inverse of a surface could not be computed."""


class NumericError(ZvonkinError):
    """A simulated state became non-finite."""

    def __init__(self, message: str, step: int | None = None, path: int | None = None):
        super().__init__(message)
        self.step = step
        self.path = path


class SimulationError(ZvonkinError):
    """Chart construction or inversion failed while simulating a path."""

    def __init__(self, message: str, state=None, step: int | None = None):
        super().__init__(message)
        self.state = state
        self.step = step


class EstimationError(ZvonkinError):
    """Not enough completed paths to form an estimate."""

    def __init__(self, message: str, terminations: dict | None = None):
        super().__init__(message)
        self.terminations = dict(terminations or {})
