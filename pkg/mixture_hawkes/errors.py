"""Exception types raised by mixture_hawkes.

Every error is a ``ValueError`` so callers that only care about invalid
input can keep catching ``ValueError``.
"""

from typing import Optional


class MixtureHawkesError(ValueError):
    """Base class for all library errors."""


class DomainError(MixtureHawkesError):
    """A parameter or observation lies outside its mathematical domain."""


class CorpusFormatError(MixtureHawkesError):
    """A corpus, headline or config file failed validation."""

    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        self.line_number = line_number
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}:"
        if line_number is not None:
            location += f"{line_number}:"
        super().__init__(f"{location} {message}" if location else message)


class DegenerateComponentError(MixtureHawkesError):
    """An EM mixture component collapsed below the minimum weight."""

    def __init__(self, component: int, weight: float, iteration: int):
        self.component = component
        self.weight = weight
        self.iteration = iteration
        super().__init__(
            f"Component {component} weight {weight:.3g} fell below the minimum at iteration {iteration}"
        )


class NonFiniteObjectiveError(MixtureHawkesError):
    """A log-likelihood or log-posterior evaluated to a non-finite value."""

    def __init__(self, message: str, item_index: Optional[int] = None, cascade_index: Optional[int] = None):
        self.item_index = item_index
        self.cascade_index = cascade_index
        super().__init__(message)


class ModelMismatchError(MixtureHawkesError):
    """Model, data and configuration disagree (K, dimensions, variant, fitted state)."""


class ConvergenceWarning(UserWarning):
    """An iterative fit stopped before meeting its convergence criterion."""
