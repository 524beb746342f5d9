"""Exception hierarchy shared by every module."""


class LieraError(Exception):
    """Base class for all errors raised by liera_lab."""


class ShapeError(LieraError, ValueError):
    pass


class DomainError(LieraError, ValueError):
    """An elementwise op received an entry outside its domain."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} at index {tuple(int(i) for i in index)}"
        super().__init__(message)
        self.index = None if index is None else tuple(int(i) for i in index)


class NonFiniteError(DomainError):
    pass


class MembershipError(DomainError):
    """A tensor left the group of entrywise-nonzero tensors."""


class OverflowGuardError(DomainError):
    pass


class FormatError(LieraError, ValueError):
    """Malformed LTEN/LCKP payload."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConvergenceError(LieraError, RuntimeError):
    pass


class ConfigError(LieraError, ValueError):
    pass
