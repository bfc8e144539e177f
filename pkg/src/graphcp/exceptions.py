"""Exception types shared across the package."""


class GraphCPError(Exception):
    """Base class for all graphcp errors."""


class InputError(GraphCPError, ValueError):
    """Invalid argument: bad shape, out-of-range value, malformed config."""


class InsufficientDataError(GraphCPError, ValueError):
    """Not enough samples to perform the requested fit."""


class FilterSingularError(GraphCPError, ArithmeticError):
    """The graph filter is singular for the requested coefficient.

    Raised when some term 1 - tau*(1 - lambda_i) of the filter spectrum is
    non-positive, so log det(H) is undefined.
    """

    def __init__(self, tau: float, eigenvalue: float):
        self.tau = tau
        self.eigenvalue = eigenvalue
        super().__init__(
            f"filter singular at tau={tau}: eigenvalue {eigenvalue} gives "
            f"1 - tau*(1 - lambda) = {1.0 - tau * (1.0 - eigenvalue)} <= 0"
        )


class FactorizationError(GraphCPError, ArithmeticError):
    """A covariance matrix could not be factorized even after regularization."""


class IngestionError(GraphCPError, ValueError):
    """An external file failed validation against its schema or the dataset."""
