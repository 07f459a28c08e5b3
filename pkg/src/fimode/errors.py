"""Exception types shared across the package.

Invalid arguments raise plain ValueError; anything that can fail at
runtime despite valid inputs gets its own class so callers can react
(reject a sample, record a failure score, abort a run).
"""


class SolverFailure(RuntimeError):
    """Integration could not be completed (step budget or step underflow)."""


class GenerationFailure(RuntimeError):
    """Dataset sampling exhausted its rejection budget."""


class NumericFailure(RuntimeError):
    """Non-finite values appeared inside a model computation."""


class TrainingFailure(RuntimeError):
    """A training step failed twice in a row (non-finite loss)."""


class InvalidStateError(RuntimeError):
    """Operation called out of order, e.g. backward without forward."""


class DatasetParseError(ValueError):
    """Malformed dataset file; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
