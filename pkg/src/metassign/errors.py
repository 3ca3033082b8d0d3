"""Exception hierarchy shared across the package."""


class MetassignError(Exception):
    """Base class for all package-specific errors."""


class NetworkParseError(MetassignError):
    """Raised when a network or trips file cannot be parsed."""


class ValidationError(MetassignError):
    """Raised when a parsed or constructed object violates its invariants."""


class DatasetFormatError(MetassignError):
    """Raised when a dataset or checkpoint file has an unsupported version."""


class DatasetIntegrityError(MetassignError):
    """Raised when a dataset or checkpoint file is corrupted or truncated."""


class ScenarioInfeasibleError(MetassignError):
    """Raised when positive demand cannot be routed on the open subgraph."""


class GenerationError(MetassignError):
    """Raised when scenario generation cannot satisfy its constraints."""


class ShapeError(MetassignError):
    """Raised on incompatible tensor shapes; message names both shapes."""


class GradientError(MetassignError):
    """Raised on invalid backward calls or non-finite gradients."""


class AdaptationError(MetassignError):
    """Raised when an inner-loop adaptation step produces a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ConfigError(MetassignError):
    """Raised on invalid or inconsistent configuration values."""


class UndefinedMetricError(MetassignError):
    """Raised when a metric is undefined for the given inputs."""


class NonFiniteError(MetassignError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""
