"""Exception hierarchy shared by all modules."""


class TraderError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TraderError, ValueError):
    pass


class DataParseError(TraderError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OrderingError(DataParseError):
    pass


class ShapeError(TraderError, ValueError):
    pass


class DomainError(TraderError, ValueError):
    pass


class ContractError(TraderError, ValueError):
    pass


class StateError(TraderError, RuntimeError):
    pass


class NumericalAbort(TraderError, FloatingPointError):
    """Training produced a non-finite loss; carries the offending diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None, phase: str | None = None):
        self.diagnostics = dict(diagnostics or {})
        self.phase = phase
        if phase:
            message = f"[{phase}] {message}"
        super().__init__(message)
