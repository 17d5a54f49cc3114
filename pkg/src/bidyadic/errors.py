"""Exception hierarchy shared by every module."""


class BidyadicError(Exception):
    """Base class for library errors."""


class ConfigError(BidyadicError, ValueError):
    """Malformed parameters or configuration."""


class DomainError(BidyadicError, ValueError):
    """An argument lies outside the operation's domain."""


class LatticeRangeError(DomainError):
    """The finite lattice is too small for the requested object."""


class InfeasibleConfiguration(BidyadicError):
    """A configuration that cannot support the requested computation."""


class InvariantViolation(BidyadicError, AssertionError):
    """A hard numerical or combinatorial invariant failed."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
