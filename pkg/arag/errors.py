# arag/errors.py

class AragError(Exception):
    """Base class for every error raised by the arag package."""


class ConfigError(AragError):
    """Invalid configuration file or flag override."""


class DataError(AragError):
    """Input data that violates the corpus contracts."""


class CorpusError(DataError):
    pass


class PoolError(DataError):
    pass


class EmbeddingError(AragError):
    pass


class BlackboardError(AragError):
    """Invalid post to a blackboard (duplicate id, bad role, stage mismatch)."""


class TraceError(DataError):
    """A trace document could not be parsed or validated."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class BackendError(AragError):
    """A chat backend failed. Always names the agent role that issued the call."""

    def __init__(self, role: str | None, message: str):
        super().__init__(f"[{role or 'unknown'}] {message}")
        self.role = role


class CassetteMiss(BackendError):
    pass


class FailureLimitExceeded(AragError):
    def __init__(self, fraction: float, limit: float):
        super().__init__(f"Failure fraction {fraction:.3f} exceeds limit {limit:.3f}")
        self.fraction = fraction
        self.limit = limit
