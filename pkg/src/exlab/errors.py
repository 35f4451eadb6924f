"""Shared exception types."""


class SynthesisError(RuntimeError):
    """Circulant embedding failed to produce a nonnegative-definite torus covariance."""


class ConditioningError(RuntimeError):
    """A Gaussian conditioning block is singular or too ill-conditioned to invert."""


class AssemblyError(RuntimeError):
    """An assembled jet covariance violates positive semidefiniteness."""


class ReliabilityError(RuntimeError):
    """A Monte Carlo estimate is unreliable (e.g. too many unstable classifications)."""
