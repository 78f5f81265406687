"""Exception hierarchy shared across the package."""


class DialoforgeError(Exception):
    """Base class for all package errors."""


class ContractError(DialoforgeError, ValueError):
    """A caller violated a documented precondition."""


class ValidationError(DialoforgeError, ValueError):
    """A domain value violates one or more type invariants.

    ``violations`` lists every broken invariant, not only the first.
    """

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


class ManifestParseError(DialoforgeError, ValueError):
    """A manifest line could not be decoded."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class TemplateError(DialoforgeError, ValueError):
    """Prompt template and scene seed do not match."""


class ScriptParseError(DialoforgeError, ValueError):
    """Raw chat-model output does not follow the dialogue grammar.

    ``fragment`` carries the offending slice of the raw output.
    """

    def __init__(self, message: str, fragment: str = ""):
        super().__init__(message)
        self.fragment = fragment


class GenerationFailedError(DialoforgeError, RuntimeError):
    """Every generation attempt produced unparseable output."""

    def __init__(self, message: str, attempts: int, last_error: Exception | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class IngestionError(DialoforgeError, ValueError):
    """A caption corpus file is missing or malformed."""

    def __init__(self, message: str, row_number: int | None = None):
        super().__init__(message if row_number is None else f"row {row_number}: {message}")
        self.row_number = row_number


class SynthesisError(DialoforgeError, RuntimeError):
    """A TTS client failed to produce audio (retryable)."""


class GateError(DialoforgeError, RuntimeError):
    """An ASR or embedding client failed during verification."""


class RejectionError(DialoforgeError, RuntimeError):
    """Every synthesis attempt failed machine verification.

    Carries the ``record`` of the final failed attempt, and the final
    rendered ``dialogue`` so callers can persist the evidence.
    """

    def __init__(self, message: str, record, dialogue=None):
        super().__init__(message)
        self.record = record
        self.dialogue = dialogue


class StateError(DialoforgeError, RuntimeError):
    """A review-state transition was not permitted (unknown id, double verdict)."""


class InvalidRmsError(DialoforgeError, ValueError):
    """A signal required for SNR mixing has zero RMS."""


class MetricError(DialoforgeError, ValueError):
    """A metric could not be computed from the given inputs."""


class EvalError(DialoforgeError, ValueError):
    """A judge reply could not be parsed into a score.

    ``raw_reply`` carries the unparseable client output.
    """

    def __init__(self, message: str, raw_reply: str = ""):
        super().__init__(message)
        self.raw_reply = raw_reply


class ConfigurationError(DialoforgeError, ValueError):
    """A run or sampler configuration is not usable."""


class NumericError(DialoforgeError, ArithmeticError):
    """A numeric kernel produced a non-finite value."""
