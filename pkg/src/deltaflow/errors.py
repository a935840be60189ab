"""Exception hierarchy shared across the engine."""


class DeltaflowError(Exception):
    """Base class for all engine errors."""


class SchemaError(DeltaflowError):
    """Tuple or schema is structurally invalid (arity, types, value range)."""


class MalformedDeltaError(DeltaflowError):
    """Delta is inconsistent with its annotation (e.g. Replace without the
    replaced tuple)."""


class DecodeError(DeltaflowError):
    """Wire frame or batch cannot be decoded."""


class RqlSyntaxError(DeltaflowError):
    """Query text does not parse."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class RqlTypeError(DeltaflowError):
    """Query parsed but failed semantic analysis."""


class UnsupportedFeatureError(DeltaflowError):
    """Query uses a construct the engine deliberately does not implement."""


class PlanError(DeltaflowError):
    """Logical or physical plan is inconsistent."""


class ProtocolError(DeltaflowError):
    """A worker or the requestor observed a frame that violates the stratum
    protocol (e.g. punctuation regressing to an earlier stratum)."""


class QueryAbort(DeltaflowError):
    """Runtime condition that aborts the running query with a diagnostic."""
