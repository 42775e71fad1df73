"""Exception types shared across the package.

I/O failures surface as the builtin ``OSError``; everything else derives
from :class:`FGLError` so callers (and the CLI) can map errors to exit codes.
"""


class FGLError(Exception):
    """Base class for contract and configuration failures."""


class ShapeError(FGLError, ValueError):
    pass


class ConfigError(FGLError, ValueError):
    pass


class FormatError(FGLError, ValueError):
    """A file exists but cannot be decoded as the expected format."""


class ContractError(FGLError, ValueError):
    pass


class GenerationError(FGLError, RuntimeError):
    """Procedural synthesis could not satisfy its constraints."""


class GeometryError(FGLError, ValueError):
    pass


class SpecError(FGLError, ValueError):
    """Invalid distortion parameters."""


class UndefinedMetricError(FGLError, ValueError):
    """Metric is undefined for the input, e.g. AUC on a single-class mask."""
