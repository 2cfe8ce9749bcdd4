"""Exception hierarchy shared across the engine."""


class AngiokitError(Exception):
    """Base class for all engine errors."""


class ValidationError(AngiokitError):
    """Input violates a documented contract (schema, range, ordering, ...).

    ``code`` is a stable machine-readable identifier, e.g. ``"incomplete_study"``;
    the service layer maps it onto HTTP error payloads and the CLI onto exit
    code 2.
    """

    def __init__(self, message, code="validation_error"):
        super().__init__(message)
        self.code = code


class ParseError(ValidationError):
    """Report text does not conform to the line grammar. Carries location."""

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, col {column}: {message}", code="parse_error")
        self.line = line
        self.column = column


class UndefinedMetricError(AngiokitError):
    """Metric is undefined on the given data (e.g. single-class AUROC).

    Bootstrap replicates that raise this are skipped and counted, never
    coerced to a number.
    """
