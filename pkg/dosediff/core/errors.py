from __future__ import annotations

from typing import Any, Dict, Optional


class DosediffError(Exception):
    """Base error for every failure raised by the package."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": type(self).__name__, "message": self.message}
        payload.update({k: v for k, v in self.details.items() if v is not None})
        return payload


class ConfigurationError(DosediffError):
    """Invalid configuration or parameter invariant violation."""


class ArgumentError(DosediffError):
    """Shape mismatch or out-of-range argument."""


class FormatError(DosediffError):
    """Malformed volume or checkpoint file."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        offset: Optional[int] = None,
        expected: Optional[int] = None,
        actual: Optional[int] = None,
    ):
        super().__init__(message, path=path, offset=offset, expected=expected, actual=actual)


class TrainingError(DosediffError):
    """Training diverged or produced a non-finite loss."""

    def __init__(self, message: str, step: Optional[int] = None, **details: Any):
        super().__init__(message, step=step, **details)


class SamplingError(DosediffError):
    """Non-finite intermediate state during reverse sampling."""

    def __init__(self, message: str, slice_index: Optional[int] = None, substep: Optional[int] = None):
        super().__init__(message, slice_index=slice_index, substep=substep)


class EvaluationError(DosediffError):
    """Metric undefined for the given inputs (empty mask, zero reference)."""
