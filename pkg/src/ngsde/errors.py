"""Exception types shared across the package."""


class NGSDEError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(NGSDEError):
    """A matrix that must be positive definite failed factorization.

    Carries optional context (e.g. the chain index at which forward
    elimination failed) in ``index``.
    """

    def __init__(self, message="matrix not positive definite", index=None):
        self.index = index
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)


class StepFailed(NGSDEError):
    """A natural-gradient step left the PD cone even after step-size backoff."""

    def __init__(self, iteration, halvings):
        self.iteration = iteration
        self.halvings = halvings
        super().__init__(
            f"natural-gradient step failed at iteration {iteration} "
            f"after {halvings} step-size halvings"
        )


class Diverged(NGSDEError):
    """An iterative baseline lost positive definiteness of its marginals."""

    def __init__(self, iteration, detail=""):
        self.iteration = iteration
        super().__init__(f"diverged at iteration {iteration}{': ' + detail if detail else ''}")


class RateNonPositive(NGSDEError):
    """A Poisson rate underflowed to a non-positive value."""


class QuadratureOverflow(NGSDEError):
    """Rates or likelihood terms overflowed at quadrature nodes."""


class DimensionTooLargeForQuadrature(NGSDEError):
    """Tensor-product quadrature would exceed the configured node budget."""


class UnsupportedDrift(NGSDEError):
    """The requested operation is restricted to a different drift class."""


class SingularInputGram(NGSDEError):
    """The input Gram matrix sum(v v^T) is not invertible."""


class SingularMomentMatrix(NGSDEError):
    """The second-moment matrix in a closed-form update is singular."""


class EmptyOccupancy(NGSDEError):
    """No latent trajectory point fell into any evaluation cell."""


class ConfigError(NGSDEError):
    """An experiment configuration failed schema validation."""
