"""Error taxonomy shared by all modules.

The CLI maps these onto process exit codes, so raising the right class is
part of the public contract, not just diagnostics.
"""


class DomainError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(DomainError):
    """An experiment config is malformed; carries the offending field path."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NumericError(RuntimeError):
    """A numerical routine failed: divergence, NaN, or a singular system."""


class ResourceError(RuntimeError):
    """An exact enumeration or dense decomposition exceeds its size budget."""
