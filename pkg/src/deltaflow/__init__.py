"""deltaflow: an embeddable recursive dataflow engine where deltas are
first-class, programmable values.

Queries are written in a small recursive SQL dialect, compiled to pipelined
dataflow plans, and executed across partitioned workers that exchange
annotated delta batches.  Recursion is stratified by punctuation barriers;
fixpoint state is checkpointed incrementally for mid-query failure recovery.
"""

__version__ = "0.1.0"

from deltaflow.core import (  # noqa: F401
    BOOL,
    CUSTOM,
    DELETE,
    FLOAT64,
    INSERT,
    INT64,
    REPLACE,
    STRING,
    Delta,
    KeyedRelation,
    Payload,
    Punctuation,
    Schema,
    apply_delta,
    custom,
    delete,
    insert,
    key_of,
    replace,
)
