"""Exception hierarchy shared by the pipeline stages.

Each top-level class maps to one CLI exit code, see ``cli.EXIT_CODES``.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(PipelineError):
    """Missing or contradictory configuration, or a required upstream artifact is absent."""


class ArtifactIOError(PipelineError):
    """An artifact file could not be read or written."""


class ValidationError(PipelineError, ValueError):
    """Input data violates a documented invariant."""


class BackendError(PipelineError):
    """A model backend call failed."""


class BackendTimeout(BackendError):
    pass


class BackendStatusError(BackendError):
    def __init__(self, status_code: int, body: str = "") -> None:
        super().__init__(f"backend returned HTTP {status_code}: {body[:200]}")
        self.status_code = status_code


class BackendConnectionError(BackendError):
    pass


class MalformedPayloadError(BackendError):
    pass


class ReplayMissError(BackendError):
    def __init__(self, request_hash: str) -> None:
        super().__init__(f"request {request_hash} not found in cassette")
        self.request_hash = request_hash


class DimensionDriftError(BackendError):
    pass


class JudgeParseError(ValidationError):
    """A judge reply did not follow the expected grammar."""
