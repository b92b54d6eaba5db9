"""Exception types shared across the package."""


class BhtmmError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(BhtmmError):
    """Malformed corpus text."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(BhtmmError):
    """A value lies outside its declared range (label, slot, or class)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StructureError(BhtmmError):
    """Broken tree connectivity: orphans, cycles, or slot clashes."""


class ConfigError(BhtmmError):
    """Inconsistent run configuration (hyper-parameters vs data)."""
