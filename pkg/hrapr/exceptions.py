"""
Exception hierarchy for the hrapr package.

Value-type problems also subclass ValueError so callers that only know
about the builtin still catch them.
"""

from typing import Any, Optional


class HRAPRError(Exception):
    """Base class for every error raised by hrapr"""


class InvalidQuaternionError(HRAPRError, ValueError):
    """Quaternion with zero or non-finite norm"""


class BuildError(HRAPRError, ValueError):
    """A record could not be added to a database"""

    def __init__(self, message: str, record_index: Optional[int] = None, record_id: Optional[str] = None):
        self.record_index = record_index
        self.record_id = record_id
        if record_index is not None:
            message = f"record {record_index} ({record_id!r}): {message}"
        super().__init__(message)


class FormatError(HRAPRError, ValueError):
    """
    Malformed database or query file.

    Text files report a line number, binary files a byte offset.
    """

    def __init__(self, message: str, path: Any = None, line: Optional[int] = None, offset: Optional[int] = None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class DimensionMismatchError(HRAPRError, ValueError):
    """Embedding dimensions disagree"""


class DegenerateEmbeddingError(HRAPRError, ValueError):
    """Embedding with zero norm"""


class RefinementError(HRAPRError):
    """A refiner step failed; the trace up to the failure is attached"""

    def __init__(self, message: str, trace: Any = None):
        self.trace = trace
        super().__init__(message)


class GenerationError(HRAPRError, ValueError):
    """Synthetic scene spec cannot be realised"""


class EvaluationError(HRAPRError, ValueError):
    """Metric requested on unusable input"""


class ConfigError(HRAPRError, ValueError):
    """Invalid run configuration"""
