"""Exception hierarchy shared across the toolkit.

The command-line layer maps these onto exit codes: data problems
(parsing, validation, singular designs, out-of-domain inputs) exit 3,
solver non-convergence exits 4.
"""


class MmrkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(MmrkitError):
    """Invalid input data: parse failures, dimension mismatches, schema problems."""


class SingularityError(DataError):
    """A matrix required to be positive definite failed to factorize."""


class NonPsdError(DataError):
    """A matrix required to be positive semidefinite has a negative eigenvalue."""


class DomainError(DataError):
    """A conjugate target lies outside the interior of the gradient range."""


class LossMismatchError(DataError):
    """A summary was computed under a different loss or sample than requested."""


class ConvergenceError(MmrkitError):
    """An iterative routine hit its iteration cap before reaching tolerance.

    Carries the best iterate seen so far in ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SeparationError(ConvergenceError):
    """GLM risk has no attained minimizer on this sample (empirically
    non-compact sub-level sets, e.g. separated logistic data)."""
