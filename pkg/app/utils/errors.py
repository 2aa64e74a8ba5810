"""
Error Types

Exception hierarchy shared by all simulation modules. Every error carries the
process exit code the CLI reports for it:

- 2: configuration error
- 3: numeric error (resolution, decomposition, basis mismatch)
- 4: artifact I/O error
"""

from typing import Optional


class SimulationError(Exception):
    """Base class for all simulator errors"""

    exit_code: int = 1


class ConfigError(SimulationError, ValueError):
    """Invalid, incomplete or unknown run configuration"""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class NumericError(SimulationError, ArithmeticError):
    """Numerical contract violated"""

    exit_code = 3


class ResolutionError(NumericError):
    """Grid too coarse or too small for the requested fields"""


class DecompositionError(NumericError):
    """SVD failed to converge or was asked for an impossible rank"""


class BasisMismatchError(NumericError, ValueError):
    """Operands refer to different mode bases or grids"""


class ArtifactError(SimulationError, OSError):
    """Artifact could not be read or written"""

    exit_code = 4


class MalformedArtifactError(ArtifactError):
    """Artifact exists but its content does not follow the documented format"""


class MissingArtifactError(ArtifactError):
    """An upstream stage has not produced its artifacts yet"""


class StageError(SimulationError):
    """
    Error raised inside a pipeline stage.

    Wraps the original error and keeps its exit code so the CLI can report
    both the failing stage and the error category.
    """

    def __init__(self, stage: str, error: BaseException):
        self.stage = stage
        self.error = error
        self.exit_code = exit_code_for(error)
        super().__init__(f"[{stage}] {error}")


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        error: Any exception raised while running a command

    Returns:
        2 for configuration/validation errors, 3 for numeric errors,
        4 for I/O errors, 1 otherwise
    """
    if isinstance(error, SimulationError):
        return error.exit_code
    if isinstance(error, ArithmeticError):
        return NumericError.exit_code
    if isinstance(error, ValueError):
        return ConfigError.exit_code
    if isinstance(error, OSError):
        return ArtifactError.exit_code
    return 1
