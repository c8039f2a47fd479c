"""Shared exception types."""


class GraphStructureError(ValueError):
    """Adjacency matrices are malformed (shape, symmetry, non-binary entries)."""


class NotAncestralError(ValueError):
    """An operation required an ancestral graph and got a non-ancestral one."""


class ActionError(ValueError):
    """An edge action violated its precondition (occupied pair, absent edge)."""


class GenerationError(RuntimeError):
    """Random structure generation failed after the retry budget."""


class DegenerateEvidenceError(ValueError):
    """Feedback has zero predictive probability under the snapshot prior."""


class EnumerationLimitError(ValueError):
    """Exhaustive enumeration requested beyond the supported node count."""


class TrainingDivergedError(RuntimeError):
    """Optimization hit a non-finite loss or gradient.

    Carries ``params`` (last finite parameter state) and ``log`` (epoch
    records up to the failure) so callers can checkpoint what survived.
    """

    def __init__(self, message: str, params=None, log=None):
        super().__init__(message)
        self.params = params
        self.log = log or []
