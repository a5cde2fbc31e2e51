"""Exception types shared across the package."""


class EvadeLabError(Exception):
    """Base class for all package errors."""


class UsageError(EvadeLabError, ValueError):
    """A call violated its preconditions (bad shapes, out-of-range arguments)."""


class ConfigError(EvadeLabError):
    """A configuration file or checkpoint is invalid or missing."""


class TrainingError(EvadeLabError, RuntimeError):
    """Training produced non-finite values."""


class NoPathError(EvadeLabError):
    """A planner could not connect start and goal."""

    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


class AllForbiddenError(EvadeLabError):
    """Every candidate path crosses a forbidden costmap zone."""
