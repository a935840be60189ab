"""User-defined aggregates: delta handlers bundled under a registered name.

A UDA packages up to three handler forms:

* aggregate form — ``update(state, delta-parts)`` / ``result(state)`` pairs
  driven by a grouping operator;
* join form — ``update(storage, opposite, delta, ctx)`` driven by the mutable
  side of a handler join, with full access to both join buckets;
* while form — custom admission logic for the fixpoint operator.

Built-in aggregates (sum, count, min, max, average) interpret Insert, Delete
and Replace annotations themselves.  Custom annotations reach them under the
adjustment convention: the value is a signed contribution and the payload
``("adj", (w,))`` carries the count weight.  Aggregates given a Custom delta
they have no interpretation for treat it as an Insert of the value — the
annotation rides along like a hidden attribute rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from deltaflow import core
from deltaflow.errors import QueryAbort, RqlTypeError

ADJUST = "adj"  # payload handler id for built-in aggregate adjustments


def delta_weight(d: core.Delta) -> int:
    """Count weight of a delta under the adjustment convention."""
    if d.kind == core.INSERT:
        return 1
    if d.kind == core.DELETE:
        return -1
    if d.kind == core.REPLACE:
        return 0
    payload = d.aux
    if payload.handler == ADJUST and payload.args:
        w = payload.args[0]
        if not isinstance(w, int):
            raise QueryAbort(f"adjustment weight must be int, got {w!r}")
        return w
    return 1  # uninterpreted custom: hidden-attribute insert


class Aggregate:
    """One aggregate instance as wired into a grouping operator.

    ``update`` consumes one delta's argument values; ``result`` produces the
    current output values (a tuple matching ``out_fields``, a list of tuples
    for table-valued aggregates, or None for "no output").  Composable
    aggregates also expose partial state as rows plus a merge, so they can be
    split into a pushed-down pre-aggregate and a combining final.
    """

    name = "?"
    out_fields: tuple = ()
    composable = False
    deterministic = True

    def init(self):
        raise NotImplementedError

    def update(self, state, d: core.Delta, values, old_values):
        raise NotImplementedError

    def result(self, state):
        raise NotImplementedError

    # Composable path -------------------------------------------------
    partial_fields: tuple = ()

    def partial(self, state) -> tuple:
        raise QueryAbort(f"{self.name} is not composable")

    def from_partial(self, values) -> object:
        raise QueryAbort(f"{self.name} is not composable")

    def merge(self, state, other):
        raise QueryAbort(f"{self.name} is not composable")

    def multiply(self, partial_values, count: int) -> tuple:
        """Compensate a partial for a join that pairs its group with
        ``count`` rows on the opposite input."""
        raise QueryAbort(f"{self.name} has no multiply")


class SumAggregate(Aggregate):
    name = "sum"
    composable = True

    def __init__(self, value_type):
        self.value_type = value_type
        self.out_fields = (("sum", value_type),)
        self.partial_fields = (("sum", value_type),)
        self._zero = 0 if value_type == core.INT64 else 0.0

    def init(self):
        return self._zero

    def update(self, state, d, values, old_values):
        k = d.kind
        if k == core.INSERT:
            return state + values[0]
        if k == core.DELETE:
            return state - values[0]
        if k == core.REPLACE:
            # Two sequential operations, pinned for float reproducibility.
            state = state - old_values[0]
            return state + values[0]
        return state + values[0]  # custom: signed adjustment

    def result(self, state):
        return (state,)

    def partial(self, state):
        return (state,)

    def from_partial(self, values):
        return values[0]

    def merge(self, state, other):
        return state + other

    def multiply(self, partial_values, count):
        return (partial_values[0] * count,)


class CountAggregate(Aggregate):
    name = "count"
    composable = True
    out_fields = (("count", core.INT64),)
    partial_fields = (("count", core.INT64),)

    def init(self):
        return 0

    def update(self, state, d, values, old_values):
        return state + delta_weight(d)

    def result(self, state):
        return (state,)

    def partial(self, state):
        return (state,)

    def from_partial(self, values):
        return values[0]

    def merge(self, state, other):
        return state + other

    def multiply(self, partial_values, count):
        return (partial_values[0] * count,)


class AverageAggregate(Aggregate):
    """Pre-aggregates (sum, count); the division happens only at result
    time, so partial folding stays exact."""

    name = "average"
    composable = True
    out_fields = (("avg", core.FLOAT64),)

    def __init__(self, value_type):
        self.value_type = value_type
        zero = 0 if value_type == core.INT64 else 0.0
        self._zero = zero
        self.partial_fields = (("sum", value_type), ("count", core.INT64))

    def init(self):
        return [self._zero, 0]

    def update(self, state, d, values, old_values):
        s, n = state
        k = d.kind
        if k == core.INSERT:
            return [s + values[0], n + 1]
        if k == core.DELETE:
            return [s - values[0], n - 1]
        if k == core.REPLACE:
            s = s - old_values[0]
            return [s + values[0], n]
        return [s + values[0], n + delta_weight(d)]

    def result(self, state):
        s, n = state
        if n == 0:
            return None  # empty group: no output this stratum
        return (s / n,)

    def partial(self, state):
        return tuple(state)

    def from_partial(self, values):
        return [values[0], values[1]]

    def merge(self, state, other):
        return [state[0] + other[0], state[1] + other[1]]

    def multiply(self, partial_values, count):
        # Scaling sum and count together leaves the ratio intact, which is
        # exactly what pairing each row with `count` join partners does.
        return (partial_values[0] * count, partial_values[1] * count)


class MinMaxAggregate(Aggregate):
    """Keeps the value multiset with signed multiplicities so deletions fall
    back to the next best and the fold commutes (a deletion folded before its
    matching insertion nets out instead of being dropped).  Not treated as
    composable for pre-aggregation (the partial is the whole multiset, which
    has no fixed-width row form), but partials can still be folded across
    workers as (value, count) pair lists -- termination gates rely on that."""

    def __init__(self, value_type, is_min):
        self.value_type = value_type
        self.is_min = is_min
        self.name = "min" if is_min else "max"
        self.out_fields = ((self.name, value_type),)

    def init(self):
        return {}

    def update(self, state, d, values, old_values):
        k = d.kind
        if k == core.DELETE:
            self._bump(state, values[0], -1)
        elif k == core.REPLACE:
            self._bump(state, old_values[0], -1)
            self._bump(state, values[0], +1)
        else:  # insert, or custom treated as hidden-attribute insert
            self._bump(state, values[0], +1)
        return state

    @staticmethod
    def _bump(state, v, w):
        n = state.get(v, 0) + w
        if n == 0:
            state.pop(v, None)
        else:
            state[v] = n

    def result(self, state):
        vals = [v for v, n in state.items() if n > 0]
        if not vals:
            return None
        return (min(vals) if self.is_min else max(vals),)

    def partial(self, state):
        return tuple(sorted((v, n) for v, n in state.items()))

    def from_partial(self, values):
        return {v: n for v, n in values}

    def merge(self, state, other):
        for v, n in other.items():
            self._bump(state, v, n)
        return state


class ArgMinAggregate(Aggregate):
    """Least-value selection: tracks (id, value) with the minimum value,
    breaking ties toward the smaller id.  Candidate streams are insert-only
    (improvements replace; deletions are not defined for selection)."""

    name = "ArgMin"

    def __init__(self, id_type=core.INT64, value_type=core.INT64):
        self.out_fields = (("id", id_type), ("dist", value_type))

    def init(self):
        return None  # or (value, id)

    def update(self, state, d, values, old_values):
        if d.kind == core.DELETE:
            raise QueryAbort("ArgMin does not accept deletions")
        ident, value = values  # called as ArgMin(id, value)
        cand = (value, ident)
        if state is None or cand < state:
            return cand
        return state

    def result(self, state):
        if state is None:
            return None
        value, ident = state
        return (ident, value)


_NUMERIC = (core.INT64, core.FLOAT64)


def make_builtin(name, value_type=core.INT64):
    """Instantiate a built-in aggregate for a column type.  ``count`` ignores
    the type (it may be applied to ``*``)."""
    if name == "avg":
        name = "average"
    if name == "count":
        return CountAggregate()
    if name in ("sum", "average") and value_type not in _NUMERIC:
        raise RqlTypeError(f"{name} needs a numeric column, got {value_type}")
    if name == "sum":
        return SumAggregate(value_type)
    if name == "average":
        return AverageAggregate(value_type)
    if name == "min":
        return MinMaxAggregate(value_type, True)
    if name == "max":
        return MinMaxAggregate(value_type, False)
    raise RqlTypeError(f"unknown built-in aggregate {name!r}")


BUILTIN_AGGREGATES = ("sum", "count", "min", "max", "average")


class ComposedAggregate(Aggregate):
    """compose(final, pre): the pre-aggregate runs the state machine, the
    final function maps merged state to the output value."""

    def __init__(self, name, pre: Aggregate, final: Callable, out_fields,
                 multiply_fn=None):
        self.name = name
        self.pre = pre
        self.final = final
        self.out_fields = tuple(out_fields)
        self.partial_fields = pre.partial_fields
        self.composable = True
        self._multiply_fn = multiply_fn

    def init(self):
        return self.pre.init()

    def update(self, state, d, values, old_values):
        return self.pre.update(state, d, values, old_values)

    def result(self, state):
        return self.final(state)

    def partial(self, state):
        return self.pre.partial(state)

    def from_partial(self, values):
        return self.pre.from_partial(values)

    def merge(self, state, other):
        return self.pre.merge(state, other)

    def multiply(self, partial_values, count):
        if self._multiply_fn is not None:
            return self._multiply_fn(partial_values, count)
        return self.pre.multiply(partial_values, count)


# ---------------------------------------------------------------------------
# Join-form handlers


class Bucket:
    """Read view of the opposite join input handed to join-form handlers."""

    __slots__ = ("_rel",)

    def __init__(self, rel: core.KeyedRelation):
        self._rel = rel

    def rows_for(self, key) -> list:
        return self._rel.by_key(key)

    def size_for(self, key) -> int:
        return len(self._rel.by_key(key))

    def sorted_rows(self) -> list:
        return self._rel.sorted_rows()

    def __len__(self):
        return len(self._rel)


class HandlerContext:
    """Execution context a join handler sees: query parameters, the current
    stratum, and the emit callback."""

    __slots__ = ("params", "stratum", "emit")

    def __init__(self, params, stratum, emit):
        self.params = params
        self.stratum = stratum
        self.emit = emit


class JoinHandler:
    """Join-form delta handler.  ``update`` runs once per delta arriving on
    the drive (mutable) side; ``flush`` runs at each stratum barrier after
    all of the stratum's deltas, for handlers that buffer.  ``storage`` is a
    plain dict owned by the operator; after a failure it is reconstructed by
    replaying the checkpointed release history through ``update``, so state
    must be a deterministic function of the deltas consumed."""

    def update(self, storage: dict, opposite: Bucket, d: core.Delta,
               ctx: HandlerContext) -> None:
        raise NotImplementedError

    def flush(self, storage: dict, opposite: Bucket, ctx: HandlerContext) -> None:
        pass


# ---------------------------------------------------------------------------
# Registry


@dataclass
class UdaDefinition:
    """A registered UDA: name, signature, handler constructors, flags."""

    name: str
    in_types: tuple
    out_fields: tuple
    make_aggregate: Optional[Callable] = None   # params -> Aggregate
    make_join_handler: Optional[Callable] = None  # params -> JoinHandler
    make_while_handler: Optional[Callable] = None
    deterministic: bool = True
    composable: bool = False
    pre_aggregate: Optional[str] = None
    params: dict = field(default_factory=dict)

    @property
    def forms(self):
        out = []
        if self.make_aggregate:
            out.append("aggregate")
        if self.make_join_handler:
            out.append("join")
        if self.make_while_handler:
            out.append("while")
        return tuple(out)


class Registry:
    def __init__(self):
        self._defs = {}

    def register(self, definition: UdaDefinition):
        name = definition.name
        if name in self._defs:
            raise RqlTypeError(f"UDA {name!r} already registered")
        if not definition.forms:
            raise RqlTypeError(f"UDA {name!r} has no handler forms")
        if definition.composable and definition.make_aggregate is None:
            raise RqlTypeError(
                f"UDA {name!r} is composable but has no aggregate form")
        if definition.pre_aggregate is not None \
                and definition.pre_aggregate not in self._defs:
            raise RqlTypeError(
                f"UDA {name!r} references unknown pre-aggregate "
                f"{definition.pre_aggregate!r}")
        self._defs[name] = definition
        return definition

    def lookup(self, name) -> UdaDefinition:
        try:
            return self._defs[name]
        except KeyError:
            raise RqlTypeError(f"unknown function {name!r}") from None

    def has(self, name):
        return name in self._defs

    def names(self):
        return sorted(self._defs)


registry = Registry()


def compose(name, final, pre: Aggregate, out_fields, multiply_fn=None):
    """Build a composable aggregate from a final function over a
    pre-aggregate's merged state."""
    return ComposedAggregate(name, pre, final, out_fields, multiply_fn)


def _register_builtins():
    """Expose the built-in aggregates through the same registry user
    functions use.  ``in_types`` of None marks a numerically polymorphic
    argument; ``make_aggregate`` accepts the resolved column type."""
    for name in BUILTIN_AGGREGATES + ("avg",):
        registry.register(UdaDefinition(
            name=name,
            in_types=() if name == "count" else (None,),
            out_fields=(),  # derived from the instantiated aggregate
            make_aggregate=lambda value_type=core.INT64, _n=name:
                make_builtin(_n, value_type),
            composable=name in ("sum", "count", "average", "avg"),
        ))
    registry.register(UdaDefinition(
        name="ArgMin",
        in_types=(core.INT64, None),  # (id, value)
        out_fields=(),
        make_aggregate=lambda id_type=core.INT64, value_type=core.INT64:
            ArgMinAggregate(id_type, value_type),
    ))


_register_builtins()
