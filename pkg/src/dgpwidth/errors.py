"""Exception types shared across the package."""


class DgpError(Exception):
    """Base class for all package errors."""


class DomainError(DgpError, ValueError):
    """An input lies outside the domain of an operation (non-finite, wrong shape...)."""


class NumericalError(DgpError, ArithmeticError):
    """A numerical routine failed (Cholesky, root finding, non-finite gradient)."""

    def __init__(self, message, min_eigenvalue=None, diagnostics=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.diagnostics = diagnostics or {}


class CapabilityError(DgpError, NotImplementedError):
    """The request is valid but exceeds what the implementation supports."""


class ConfigError(DgpError, ValueError):
    """An experiment configuration is malformed."""
