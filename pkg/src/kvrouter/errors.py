"""Exception types shared across the engine.

Each family maps onto one CLI exit code (see cli.EXIT_CODES): configuration
and input problems, infeasible budgets, I/O failures, and malformed artifacts.
"""


class KvRouterError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(KvRouterError):
    """Invalid spec, knob value, policy name, or incompatible combination."""


class InputError(KvRouterError):
    """Caller-supplied data violates an operation precondition."""


class ShapeError(InputError):
    """Tensor argument has an unusable shape."""


class ProtocolError(KvRouterError):
    """Cache mutated out of order (e.g. append at a stale position)."""


class StateError(KvRouterError):
    """Operation needs state the object does not hold yet."""


class FormatError(KvRouterError):
    """Persisted artifact is malformed or violates its invariants."""


class StaleCalibrationError(FormatError):
    """Sensitivity table was calibrated for a different model."""


class CalibrationError(KvRouterError):
    """Calibration produced an undefined score (zero-norm reference output)."""


class SizeError(KvRouterError):
    """Exhaustive solver instance is too large to enumerate."""


class InfeasibleBudgetError(KvRouterError):
    """Budget below the cheapest feasible allocation."""

    def __init__(self, deficit_bytes: float, message: str | None = None):
        self.deficit_bytes = float(deficit_bytes)
        super().__init__(
            message
            or f"memory budget infeasible: short by {self.deficit_bytes:.0f} bytes"
        )
