from typing import Any, Optional


class SMNError(Exception):
    """Base class for every error the pipeline raises on purpose."""

    exit_code = 1


class ConfigError(SMNError):
    exit_code = 2


class MissingArtifactError(SMNError, FileNotFoundError):
    exit_code = 3

    def __init__(self, path: str, hint: str = ""):
        self.path = str(path)
        message = f"Missing artifact: {self.path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class NumericalError(SMNError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, op: Optional[str] = None, step: Optional[int] = None):
        self.op = op
        self.step = step
        super().__init__(message)


class ShapeError(SMNError, ValueError):
    """Shape disagreement, naming the operation and the offending dimension."""

    def __init__(self, op: str, dimension: str, expected: Any, got: Any):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dimension}' expected {expected}, got {got}")


class DegenerateBoxError(SMNError, ValueError):
    def __init__(self, op: str, box: Any):
        self.op = op
        self.box = box
        super().__init__(f"{op}: degenerate (zero-area) box {box}")


class DatasetError(SMNError):
    def __init__(self, message: str, record_index: Optional[int] = None):
        self.record_index = record_index
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)


class CheckpointError(SMNError):
    exit_code = 3


class SceneGenerationError(SMNError):
    pass
