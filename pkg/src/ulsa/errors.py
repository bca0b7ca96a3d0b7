"""Exception hierarchy shared across the package.

Everything user-facing derives from :class:`UlsaError` so the CLI can turn
library failures into clean exit codes instead of tracebacks.
"""


class UlsaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(UlsaError):
    """Tensor operands have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class NonFiniteValue(UlsaError):
    """A forward or backward computation produced NaN or Inf."""


class InsufficientTissue(UlsaError):
    """Too few stained pixels survive the optical-density pre-filter."""


class DegenerateStains(UlsaError):
    """The optical-density cloud does not span two distinct stain directions."""


class MissingTranslator(UlsaError):
    """No stain translator registered for a requested (source, target) pair."""


class TranslationFailed(UlsaError):
    """A single record could not be translated (collected, not fatal)."""


class EmptyPool(UlsaError):
    """A sampler was asked to draw from an empty stain pool."""

    def __init__(self, stain: str):
        super().__init__(f"no samples available for stain '{stain}'")
        self.stain = stain


class SingleClass(UlsaError):
    """AUROC needs both positive and negative labels present."""


class ManifestError(UlsaError):
    """A manifest file violates the documented record schema or invariants."""


class ConfigError(UlsaError):
    """A run-configuration file is malformed or contains unknown keys."""
