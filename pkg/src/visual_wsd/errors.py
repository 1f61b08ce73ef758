"""Exception hierarchy. Each family carries the exit code the CLI reports for it."""


class VwsdError(Exception):
    """Base class for all errors raised by visual_wsd."""

    exit_code = 1


class ConfigError(VwsdError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class UnsupportedCombinationError(ConfigError):
    """A system preset combination that is not offered (e.g. LangSpec with Def)."""


class DataError(VwsdError):
    """Problems with input data: malformed files, broken invariants."""

    exit_code = 3


class ParseError(DataError):
    """A line of an input file could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class IntegrityError(DataError):
    """Inputs are individually well formed but inconsistent with each other."""


class InputValidationError(DataError):
    """A value is outside its allowed domain."""


class EvaluationError(DataError):
    """Metrics cannot be computed for the given predictions."""


class BuildError(DataError):
    """A derived dataset cannot be built from the given resource."""


class ShapeError(DataError):
    """Vectors with mismatching dimensions."""


class DegenerateInputError(DataError):
    """Zero vectors, zero variance and similar inputs with no defined result."""


class ProviderError(VwsdError):
    """Embeddings, translations or definitions could not be obtained."""

    exit_code = 4


class RetryableProviderError(ProviderError):
    """Transport failure talking to an inference service."""

    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ResponseIntegrityError(ProviderError):
    """A service answer that is inconsistent with the request or the store."""


class ResponseParseError(ProviderError):
    """A service answer could not be parsed. Keeps the raw text for inspection."""

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class AugmentationUnavailableError(ProviderError):
    """No cached definition and no generation service configured."""


class TranslationUnavailableError(ProviderError):
    """No cached translation and no translation service configured."""
