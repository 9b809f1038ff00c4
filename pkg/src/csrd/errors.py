"""Exception types shared across the package."""


class CsrdError(Exception):
    """Base class for all package errors."""


class DimensionError(CsrdError, ValueError):
    """Shapes, spacings, or bounds do not line up."""


class DomainError(CsrdError, ValueError):
    """A value violates its intensity-domain contract (counts vs normalized)."""


class TilingError(CsrdError, ValueError):
    """A tiling request cannot be satisfied (patch larger than volume, bad stride)."""


class CompletenessError(CsrdError, ValueError):
    """A stitch call is missing patches for regions of its plan."""


class SpecError(CsrdError, ValueError):
    """A generator spec is self-inconsistent (e.g. ellipsoid out of bounds)."""


class ConfigError(CsrdError, ValueError):
    """A run or model configuration is invalid; message lists every violation."""


class ManifestError(CsrdError, ValueError):
    """A dataset manifest is missing files or references inconsistent volumes."""


class NumericError(CsrdError, RuntimeError):
    """A numeric failure (NaN/Inf) surfaced mid-computation, with context."""
