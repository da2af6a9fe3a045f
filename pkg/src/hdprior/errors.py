"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or map extents are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar or configuration argument is outside its valid domain."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


class StateError(RuntimeError):
    """A cached forward state is stale or does not match the request."""


class TrainingError(RuntimeError):
    """Training diverged or violated a frozen-parameter contract."""
