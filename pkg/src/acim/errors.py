"""Exception hierarchy.

Hypothesis failures are never raised; they are report entries. Only
malformed input and genuinely undefined computations raise.
"""


class AcimError(Exception):
    """Base class for all errors raised by :mod:`acim`."""


class InputError(AcimError, ValueError):
    """Malformed or inconsistent input (index out of range, grid mismatch)."""


class ConfigError(InputError):
    """Invalid experiment configuration. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateMeasureError(AcimError):
    """A ratio was requested against a set of zero measure."""


class NonsingularityError(AcimError):
    """A branch has vanishing derivative on a set of positive length."""


class NormalizationError(AcimError):
    """S_n(I0) is zero, so the ratio normalization is undefined."""


class IrreducibilityError(AcimError):
    """A pair of partition elements is not connected by any backward iterate."""


class EscapeOverflowError(AcimError):
    """Cumulative escaped mass exceeded the configured fraction of the seed."""
