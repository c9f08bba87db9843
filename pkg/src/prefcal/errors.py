"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class PrefcalError(Exception):
    """Base class for all errors raised by prefcal."""


class ParameterError(PrefcalError, ValueError):
    """An argument is outside its documented domain."""


class IngestionError(PrefcalError):
    """An input stream could not be read or lacks required structure."""


class NumericError(PrefcalError, ArithmeticError):
    """A numeric routine met non-finite input or a singular system."""


class CompositionError(PrefcalError):
    """Inputs that must line up (ratings, scores, embeddings) do not."""


class ConsensusSamplingError(PrefcalError):
    """Too few images satisfy the consensus criteria."""

    def __init__(self, message: str, n_high: int, n_low: int, required: int):
        super().__init__(message)
        self.n_high = n_high
        self.n_low = n_low
        self.required = required


class DimensionParseError(PrefcalError):
    """A VLM response could not be turned into a valid dimension set."""


class NoJsonFoundError(DimensionParseError):
    pass


class CardinalityError(DimensionParseError):
    pass


class DuplicateNameError(DimensionParseError):
    pass


class MissingFieldError(DimensionParseError):
    pass


class MalformedDimensionError(DimensionParseError):
    """JSON was found but has the wrong shape or value types."""


class BackendError(PrefcalError):
    """Failure talking to, or interpreting output from, a VLM backend."""


class TransientBackendError(BackendError):
    """A retryable failure (timeouts, 429, 5xx)."""


class TransportError(BackendError):
    """Retries were exhausted."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CredentialError(BackendError):
    """Authentication was rejected; never retried."""


class ContentError(BackendError):
    """The backend answered but the content is unusable."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class EvaluationError(PrefcalError):
    pass


class SearchStateError(PrefcalError):
    pass


class ConfigError(PrefcalError):
    """Configuration failed validation; ``violations`` lists every problem."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


class MissingArtifactError(PrefcalError):
    """A stage ran before the stage that produces its input."""

    def __init__(self, path: str, producer: str):
        super().__init__(f"missing artifact {path}; run `prefcal {producer}` first")
        self.path = path
        self.producer = producer
