"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2.
"""


class GridTopoError(Exception):
    pass


class ConfigError(GridTopoError, ValueError):
    """Invalid configuration value or inconsistent options."""


class DataError(GridTopoError, ValueError):
    """Input data violates a documented contract."""


class SchemaError(DataError):
    """A CSV file is missing a required column."""

    def __init__(self, path, column):
        self.path = str(path)
        self.column = column
        super().__init__(f"{self.path}: missing required column {column!r}")


class StructuralError(GridTopoError, ValueError):
    """An operation was called on structurally incompatible inputs."""


class UnresolvableError(GridTopoError):
    """Not enough information to produce an answer for one item."""


class GeocodeTransportError(GridTopoError, OSError):
    """Geocoding backend could not be reached; the call may be retried."""


class StageError(GridTopoError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
