"""Exception types raised across the package."""


class NGILError(Exception):
    """Base class for all package errors."""


class StructuralError(NGILError, ValueError):
    """A graph operation received structurally invalid input."""


class VertexNotFoundError(NGILError, KeyError):
    """A vertex or task head that was asked for does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class DegenerateInputError(NGILError, ValueError):
    pass


class PreconditionError(NGILError, ValueError):
    pass


class DivergenceError(NGILError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``checkpoint`` holds a copy of the last parameters for which the loss was
    finite, so callers can inspect or resume from them.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class BundleError(NGILError, ValueError):
    """A graph bundle or run artifact failed validation."""
