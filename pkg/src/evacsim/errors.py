"""Exception types shared across the package.

The CLI maps these onto exit codes: anything raised while reading or
validating input (syntax, schema, semantics, hazard format) is a
validation failure; :class:`SimulationError` covers failures that occur
once a run is underway.
"""


class EvacsimError(Exception):
    """Base class for every error raised by evacsim."""


class ScenarioSyntaxError(EvacsimError):
    """Malformed document; reports the position where parsing stopped."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class SchemaViolation(EvacsimError):
    """A field is missing, has the wrong type, or is unknown."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SemanticViolation(EvacsimError):
    """Structurally valid input that breaks a documented invariant."""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"{invariant}: {message}")


class HazardFormatError(EvacsimError):
    """Bad hazard time series: syntax, ordering, range or grid mismatch."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SimulationError(EvacsimError):
    """Runtime failure inside a simulation run (not an input problem)."""


VALIDATION_ERRORS = (ScenarioSyntaxError, SchemaViolation, SemanticViolation, HazardFormatError)
