"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """A config or spec field failed validation. Message names the field."""


class NoValidPatchError(RuntimeError):
    """Rejection sampling exhausted retries without finding a valid patch."""


class SynthesisFailureError(RuntimeError):
    """Synthetic-patch generation exhausted its regeneration attempts."""


class StreamExhaustedError(RuntimeError):
    """A training data stream could not supply the requested examples."""


class UndefinedAUCError(ValueError):
    """AUC requested for a score set with fewer than two classes."""


class DegenerateVarianceError(ValueError):
    """DeLong variance estimate is zero while the AUCs differ."""


class StageError(RuntimeError):
    """An experiment stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
