"""Exception types raised across the pipeline."""


class VulGraphError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(VulGraphError):
    """A CPG document does not match the canonical schema."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IntegrityError(VulGraphError):
    """A CPG document is well-formed but internally inconsistent."""


class MappingError(VulGraphError):
    def __init__(self, statements):
        self.statements = list(statements)
        super().__init__(f"no node matches statement(s): {self.statements!r}")


class ProviderError(VulGraphError):
    def __init__(self, provider: str, message: str):
        self.provider = provider
        super().__init__(f"[{provider}] {message}")


class DimensionError(VulGraphError, ValueError):
    pass


class AlignmentError(VulGraphError, ValueError):
    pass


class ConfigError(VulGraphError, ValueError):
    pass


class DataError(VulGraphError, ValueError):
    pass


class DivergenceError(VulGraphError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose losses were all finite.
    """

    def __init__(self, message: str, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class RejectedInput(VulGraphError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)
