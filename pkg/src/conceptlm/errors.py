"""Exception types shared across the toolkit."""


class ConceptLMError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ConceptLMError):
    """Invalid or inconsistent configuration."""


class VocabularyError(ConceptLMError):
    """Token id or token string outside the vocabulary."""


class ParseError(ConceptLMError):
    """Malformed record or provider reply."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CapError(ParseError):
    """Synonym set exceeds the configured cap."""


class TransportError(ConceptLMError):
    """External provider unreachable after retries."""

    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class ContextError(ConceptLMError):
    """Input longer than the model context window."""


class ShapeError(ConceptLMError):
    """Mismatched array shapes."""


class NumericalError(ConceptLMError):
    """NaN or infinity where a finite value is required."""


class SamplingError(ConceptLMError):
    """Requested sample larger than the available pool."""


class PairingError(ConceptLMError):
    """Per-token records of two models do not align."""


class EmptyMetricError(ConceptLMError):
    """Metric requested over an empty record subset."""


class CheckpointError(ConceptLMError):
    """Unreadable or incompatible checkpoint file."""
