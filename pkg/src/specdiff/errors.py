"""Exception taxonomy shared by all specdiff modules.

The CLI maps these onto stable exit codes (see ``specdiff.cli``).
"""


class SpecdiffError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SpecdiffError, ValueError):
    """Invalid caller-supplied values (bad node index, negative weight, ...)."""


class ShapeError(SpecdiffError, ValueError):
    """Array arguments whose shapes do not fit the operation."""


class ConfigError(SpecdiffError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataFormatError(SpecdiffError, ValueError):
    """Malformed dataset / graph / checkpoint files."""


class NumericError(SpecdiffError, RuntimeError):
    """Non-finite values or failed numeric procedures (fail fast)."""


class UsageError(SpecdiffError, RuntimeError):
    """API misuse: wrong call order, missing gradients, out-of-range step index."""


class AlignmentError(SpecdiffError, ValueError):
    """Forecast artifacts that do not line up with the ground-truth data."""
