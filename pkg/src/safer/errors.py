"""Exception types shared across the package."""


class SaferError(Exception):
    """Base class for all package errors."""


class DimensionError(SaferError, ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class DomainError(SaferError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(SaferError, RuntimeError):
    """A call violated a documented precondition."""


class ConfigError(SaferError, ValueError):
    """Invalid configuration value."""


class RegistryError(SaferError, KeyError):
    """Unknown layer handle or parameter name."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(SaferError, ValueError):
    """Malformed binary file."""


class VersionError(SaferError, ValueError):
    """Checkpoint does not match the expected format or model."""
