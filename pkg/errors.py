"""Exception hierarchy for the traffic identification engine.

Every error carries the process exit status the CLI reports for it:
1 for bad user input, 2 for backend failures, 3 for internal-consistency bugs.
"""

from typing import Optional


class EngineError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class InputValidationError(EngineError):
    """Input that does not satisfy a documented contract."""

    exit_code = 1


class FlowParseError(InputValidationError):
    """A record line that is not a well-formed structured record."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class FlowValidationError(InputValidationError):
    """A parsed record violating a FlowRecord invariant."""

    def __init__(self, message: str, field: str, line_number: Optional[int] = None):
        location = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{location}{field}: {message}")
        self.field = field
        self.line_number = line_number


class ConfigError(InputValidationError):
    def __init__(self, message: str, field: str = "config"):
        super().__init__(f"{field}: {message}")
        self.field = field


class SnapshotError(InputValidationError):
    """Unreadable database snapshot (version, checksum, truncation)."""


class TemplateError(InputValidationError):
    pass


class MetricsValidationError(InputValidationError):
    pass


class BackendError(EngineError):
    exit_code = 2

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message if status is None else f"{message} (status {status})")
        self.status = status


class BackendTimeoutError(BackendError):
    pass


class VerdictParseError(EngineError):
    """Backend output from which no single label could be extracted."""

    exit_code = 2

    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


class InternalConsistencyError(EngineError):
    exit_code = 3
