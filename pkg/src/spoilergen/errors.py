"""Exception hierarchy shared by the pipeline modules.

The CLI maps :class:`DataError` to exit code 2 and :class:`BackendError`
to exit code 3.
"""

from __future__ import annotations


class SpoilerGenError(Exception):
    """Base class for every error raised on purpose by this package."""


class DataError(SpoilerGenError, ValueError):
    """Malformed corpus, config or intermediate file."""


class BackendError(SpoilerGenError):
    """Something went wrong talking to a completion/embedding/score service."""

    def __init__(self, message: str, backend: str | None = None) -> None:
        super().__init__(message)
        self.backend = backend


class BackendUnavailable(BackendError):
    def __init__(self, backend: str, attempts: int, cause: BaseException | None = None) -> None:
        super().__init__(
            f"backend {backend!r} unavailable after {attempts} attempt(s): {cause}", backend
        )
        self.attempts = attempts
        self.cause = cause


class EmptyCompletion(BackendError):
    def __init__(self, backend: str) -> None:
        super().__init__(f"backend {backend!r} returned an empty completion", backend)


class ProtocolError(BackendError):
    """The service answered, but not in the agreed wire format."""


class NoCandidates(BackendError):
    def __init__(self, record_id: str, tried: list[str]) -> None:
        super().__init__(
            f"record {record_id!r}: no non-empty candidates from backends {tried}"
        )
        self.record_id = record_id
        self.tried = tried


class RecordError(SpoilerGenError):
    """Wraps a failure during per-record processing with the record id."""

    def __init__(self, record_id: str, cause: BaseException) -> None:
        super().__init__(f"record {record_id!r}: {cause}")
        self.record_id = record_id
        self.cause = cause
