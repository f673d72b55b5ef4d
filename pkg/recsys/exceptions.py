"""Exception hierarchy for the training engine.

Every error carries the process exit code a management command should use:
2 for bad input (files, formats, configuration), 3 for runtime and numeric
failures.
"""
from typing import Any, Dict, Optional


class SRNSError(Exception):
    """Base class for engine errors."""

    exit_code = 3


class InputError(SRNSError):
    """Raised for problems with user-supplied files or settings."""

    exit_code = 2


class DataFormatError(InputError):
    """Raised when a raw interaction line cannot be parsed."""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        self.reason = reason
        super().__init__(f'{path}: line {line_number}: {reason}')


class EmptyDatasetError(InputError):
    """Raised when ingestion or filtering leaves no interactions."""


class ConfigurationError(InputError):
    """Raised for invalid or inconsistent configuration values."""


class MissingArtifactError(InputError):
    """Raised when a file or directory a command needs does not exist."""

    def __init__(self, path: str, what: str = 'file'):
        self.path = str(path)
        super().__init__(f'{what} not found: {path}')


class NoCandidateError(SRNSError):
    """Raised when a user has no item left to sample as a negative."""

    def __init__(self, user: int, message: Optional[str] = None):
        self.user = user
        super().__init__(message or f'user {user} has no non-interacted item to sample')


class NumericalError(SRNSError):
    """Raised when a gradient or loss stops being finite."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.context = dict(context or {})
        if self.context:
            detail = ', '.join(f'{k}={v}' for k, v in self.context.items())
            message = f'{message} ({detail})'
        super().__init__(message)


class ProtocolError(SRNSError):
    """Raised when an evaluation protocol cannot be satisfied."""
