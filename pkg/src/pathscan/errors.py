"""Exception hierarchy shared across the package."""


class PathscanError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(PathscanError):
    """Input data violates a documented precondition."""


class InvalidConfigError(PathscanError):
    """Configuration value is out of its legal range or infeasible."""


class ShapeError(PathscanError):
    """Tensor/array shapes are incompatible for the requested operation."""


class RangeError(PathscanError):
    """Coordinate or index falls outside its legal bounds."""


class FormatError(PathscanError):
    """A binary or text artifact fails header/structure validation."""


class DegenerateInputError(PathscanError):
    """Input is degenerate for the operation (e.g. zero-variance map)."""


class ContractError(PathscanError):
    """Caller violated an API contract (e.g. non-scalar loss)."""


class NumericError(PathscanError):
    """A numeric operation produced NaN/Inf on finite inputs."""
