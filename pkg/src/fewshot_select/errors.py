"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FewShotError(Exception):
    """Base class for all package errors."""


class DatasetError(FewShotError):
    pass


class RenderError(FewShotError):
    pass


class ConfigError(FewShotError):
    pass


class BackendError(FewShotError):
    """Any failure inside a scoring backend."""


class TransportError(BackendError):
    """Upstream request failed. ``retryable`` marks transient failures."""

    def __init__(self, message: str, retryable: bool = True) -> None:
        super().__init__(message)
        self.retryable = retryable


class MissingRecordingError(TransportError):
    def __init__(self, digest: str) -> None:
        super().__init__(f"no recorded response for digest {digest}", retryable=False)
        self.digest = digest


class DigestMismatchError(BackendError):
    pass


class ContextLengthError(BackendError):
    def __init__(self, message: str, length: int) -> None:
        super().__init__(f"{message} (measured length {length})")
        self.length = length


class BudgetExhausted(FewShotError):
    """Raised before an upstream pass that would exceed the configured budget.

    ``partial`` optionally carries whatever was built before exhaustion.
    """

    def __init__(self, message: str, partial: object | None = None) -> None:
        super().__init__(message)
        self.partial = partial


class IncompleteTableError(FewShotError):
    pass
