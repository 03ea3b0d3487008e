"""Exception types shared across the package.

The CLI maps these to exit codes: configuration problems exit 2, numerical
failures exit 3, failed audits exit 4.
"""


class FedMuonError(Exception):
    """Base class for all package errors."""


class InvalidArg(FedMuonError):
    """An argument violates a documented precondition."""


class ConfigInvalid(FedMuonError):
    """A run configuration violates its invariants."""


class ShapeMismatch(FedMuonError):
    """Matrix shapes disagree with the problem or each other."""


class NonFiniteInput(FedMuonError):
    """An input matrix contains NaN or Inf."""


class NonFiniteState(FedMuonError):
    """An optimizer update produced NaN or Inf."""


class ZeroMatrix(FedMuonError):
    """Newton-Schulz was asked to orthonormalize an all-zero matrix."""


class EmptyWorkerSet(FedMuonError):
    """Averaging was requested over zero workers."""


class CalibrationFailed(FedMuonError):
    """Noise-scale bisection did not converge within its iteration budget."""


class InsufficientRuns(FedMuonError):
    """An expectation-bound audit was given too few seeded runs."""


class InsufficientPoints(FedMuonError):
    """A rate fit was given too few points or too little dynamic range."""
