"""Exception hierarchy shared by all modules."""


class SpdeError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SpdeError):
    """Invalid parameters, incompatible meshes/lattices, bad config files."""


class InputError(SpdeError):
    """Malformed numerical input (wrong shapes, non-finite values)."""


class UnsupportedOperationError(SpdeError):
    """The requested operation is not available for this mesh or model."""


class NumericalError(SpdeError):
    """An iterative method failed to reach its tolerance.

    Attributes
    ----------
    residual : float
        Relative residual achieved when the iteration stopped.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual
