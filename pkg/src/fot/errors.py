"""Exception types shared across the package."""

from __future__ import annotations


class FotError(Exception):
    """Base class for all package errors."""


class NoJsonFound(FotError):
    """No balanced JSON object could be parsed out of a model response."""


class TransportError(FotError):
    """A backend call failed at the transport level.

    ``retryable`` marks failures worth retrying (connection errors,
    rate limits, 5xx); anything else should surface immediately.
    """

    def __init__(self, message: str, *, retryable: bool = True) -> None:
        super().__init__(message)
        self.retryable = retryable


class MissingScript(FotError):
    """The scripted mock has no entry for the requested stage/fingerprint."""


class StageCapExceeded(FotError):
    """A chat exchange declared more completion tokens than its stage allows."""


class EmptyResponse(FotError):
    """The model returned only whitespace."""


class UnknownAgent(FotError):
    """A participation policy references an agent id that is not configured."""


class UnknownTask(FotError):
    """An agent references a task id with no loaded problem."""


class MissingGold(FotError):
    """A gradable problem has no gold answer."""


class MalformedRow(FotError):
    """A benchmark file row could not be parsed."""

    def __init__(self, message: str, *, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(FotError):
    """Two benchmark rows share a problem id."""


class MissingArtifacts(FotError):
    """A run directory lacks the artifacts a report needs."""

    def __init__(self, missing: list[str]) -> None:
        super().__init__("missing run artifacts: " + ", ".join(missing))
        self.missing = list(missing)
