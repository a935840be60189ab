"""Core data model: schemas, annotated deltas, punctuation, keyed state.

A delta is a tuple paired with an annotation: Insert, Delete (delete if
present), Replace (carries the replaced tuple), or Custom (an opaque payload
interpreted by whichever stateful operator downstream has a handler for it;
operators without one pass it through untouched, as if the annotation were an
extra hidden attribute).

Floats compare bitwise everywhere state is concerned: membership, duplicate
suppression, and deterministic ordering all go through the canonical byte
encoding from the kernel layer rather than ``==``.
"""

from __future__ import annotations

from typing import Iterator, NamedTuple, Optional

from deltaflow import _kernels
from deltaflow.errors import MalformedDeltaError, SchemaError

INT64 = "int64"
FLOAT64 = "float64"
STRING = "string"
BOOL = "bool"

_TYPE_TO_TAG = {
    INT64: _kernels.T_INT64,
    FLOAT64: _kernels.T_FLOAT64,
    STRING: _kernels.T_STRING,
    BOOL: _kernels.T_BOOL,
}
_PY_TYPES = {INT64: int, FLOAT64: float, STRING: str, BOOL: bool}

INSERT = 0
DELETE = 1
REPLACE = 2
CUSTOM = 3

KIND_NAMES = {INSERT: "+", DELETE: "-", REPLACE: "->", CUSTOM: "@"}

END_OF_STRATUM = _kernels.P_END_OF_STRATUM
END_OF_QUERY = _kernels.P_END_OF_QUERY


class Schema:
    """Ordered, named, typed columns.  Immutable."""

    __slots__ = ("fields", "names", "types", "tags", "_index")

    def __init__(self, fields):
        fields = tuple((str(n), str(t)) for n, t in fields)
        if not fields:
            raise SchemaError("schema needs at least one column")
        names = tuple(n for n, _ in fields)
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {names}")
        for n, t in fields:
            if t not in _TYPE_TO_TAG:
                raise SchemaError(f"unknown column type {t!r} for {n!r}")
        self.fields = fields
        self.names = names
        self.types = tuple(t for _, t in fields)
        self.tags = bytes(_TYPE_TO_TAG[t] for t in self.types)
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def arity(self):
        return len(self.fields)

    def col(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"no column {name!r} in {self.names}") from None

    def has(self, name):
        return name in self._index

    def validate(self, row):
        if not isinstance(row, tuple) or len(row) != self.arity:
            raise SchemaError(f"row {row!r} does not match arity {self.arity}")
        for v, t in zip(row, self.types):
            if v.__class__ is not _PY_TYPES[t]:
                raise SchemaError(f"value {v!r} is not {t}")

    def canon(self, row):
        """Canonical bytes for bitwise membership and deterministic sorting."""
        try:
            return _kernels.encode_row(self.tags, row)
        except _kernels.KernelError as e:
            raise SchemaError(str(e)) from None

    def __eq__(self, other):
        return isinstance(other, Schema) and self.fields == other.fields

    def __hash__(self):
        return hash(self.fields)

    def __repr__(self):
        return "Schema(" + ", ".join(f"{n}:{t}" for n, t in self.fields) + ")"


class Payload(NamedTuple):
    """Custom-annotation payload: a handler identifier plus typed arguments.
    ``handler`` names the interpretation (e.g. "adj" for the built-in
    aggregate adjustment convention); ``args`` travel with the tuple."""

    handler: str
    args: tuple


class Delta(NamedTuple):
    """One annotated tuple.  ``aux`` is the replaced row for Replace, the
    Payload for Custom, and None otherwise.  Being a tuple subclass it passes
    through the kernel codec unchanged."""

    kind: int
    row: tuple
    aux: object = None

    def __str__(self):
        if self.kind == REPLACE:
            return f"->{self.row!r} (was {self.aux!r})"
        if self.kind == CUSTOM:
            return f"@{self.row!r} {self.aux!r}"
        return f"{KIND_NAMES[self.kind]}{self.row!r}"


def insert(row):
    return Delta(INSERT, row)


def delete(row):
    return Delta(DELETE, row)


def replace(new_row, old_row):
    return Delta(REPLACE, new_row, old_row)


def custom(row, handler, args=()):
    return Delta(CUSTOM, row, Payload(handler, tuple(args)))


def check_delta(schema, d):
    """Validate a delta against a schema; raises on structural problems."""
    schema.validate(d.row)
    if d.kind == REPLACE:
        if d.aux is None:
            raise MalformedDeltaError(f"replace without replaced row: {d}")
        schema.validate(d.aux)
    elif d.kind == CUSTOM:
        if not isinstance(d.aux, Payload):
            raise MalformedDeltaError(f"custom without payload: {d}")
    elif d.aux is not None:
        raise MalformedDeltaError(f"{KIND_NAMES[d.kind]} carries no aux: {d}")


def canon_delta(schema, d):
    """Canonical bytes of a whole delta (annotation, row, aux); the sort key
    for deterministic folds."""
    try:
        return _kernels.encode_delta(schema.tags, d.kind, d.row,
                                     tuple(d.aux) if d.kind == CUSTOM else d.aux)
    except _kernels.KernelError as e:
        raise MalformedDeltaError(str(e)) from None


class Punctuation(NamedTuple):
    """Stream marker: end of one stratum or of the whole query."""

    kind: int
    stratum: int

    def __str__(self):
        if self.kind == END_OF_QUERY:
            return "EndOfQuery"
        return f"EndOfStratum({self.stratum})"


def end_of_stratum(n):
    return Punctuation(END_OF_STRATUM, n)


END_OF_QUERY_PUNCT = Punctuation(END_OF_QUERY, 0)


def key_of(row, key_attrs):
    """Project the key attributes of a row.  Always a tuple; the empty
    attribute list yields the unit key (one global group)."""
    return tuple(row[i] for i in key_attrs)


class ChangeSummary(NamedTuple):
    inserted: int
    deleted: int
    replaced: int


_NO_CHANGE = ChangeSummary(0, 0, 0)


class KeyedRelation:
    """Multiset-free tuple store with bitwise membership, optionally indexed
    by a key.  Insert of a bitwise-identical row is a no-op; Delete of an
    absent row is a no-op; Replace of an absent row inserts (upsert).
    """

    __slots__ = ("schema", "key_attrs", "rows", "index")

    def __init__(self, schema, key_attrs=()):
        self.schema = schema
        self.key_attrs = tuple(key_attrs)
        self.rows = {}  # canon bytes -> row
        self.index = {} if self.key_attrs else None  # key -> {canon: row}

    def __len__(self):
        return len(self.rows)

    def __contains__(self, row):
        return self.schema.canon(row) in self.rows

    def __iter__(self) -> Iterator[tuple]:
        return iter(self.rows.values())

    def sorted_rows(self):
        return [row for _, row in sorted(self.rows.items())]

    def by_key(self, key):
        bucket = self.index.get(key)
        return list(bucket.values()) if bucket else []

    def keys(self):
        return self.index.keys()

    def _insert(self, row):
        c = self.schema.canon(row)
        if c in self.rows:
            return 0
        self.rows[c] = row
        if self.index is not None:
            self.index.setdefault(key_of(row, self.key_attrs), {})[c] = row
        return 1

    def _delete(self, row):
        c = self.schema.canon(row)
        if c not in self.rows:
            return 0
        del self.rows[c]
        if self.index is not None:
            k = key_of(row, self.key_attrs)
            bucket = self.index[k]
            del bucket[c]
            if not bucket:
                del self.index[k]
        return 1

    def apply(self, d: Delta) -> ChangeSummary:
        """Fold one delta into the relation.  Custom deltas are handler
        territory and are rejected here."""
        check_delta(self.schema, d)
        if d.kind == INSERT:
            return ChangeSummary(self._insert(d.row), 0, 0)
        if d.kind == DELETE:
            return ChangeSummary(0, self._delete(d.row), 0)
        if d.kind == REPLACE:
            removed = self._delete(d.aux)
            added = self._insert(d.row)
            if removed and added:
                return ChangeSummary(0, 0, 1)
            return ChangeSummary(added, removed, 0)
        raise MalformedDeltaError(f"custom delta has no default fold: {d}")


def apply_delta(state: KeyedRelation, d: Delta) -> ChangeSummary:
    """Module-level alias for KeyedRelation.apply."""
    return state.apply(d)


def fold(state: KeyedRelation, deltas) -> ChangeSummary:
    """Apply a sequence of deltas; returns the summed change summary."""
    ins = dels = reps = 0
    for d in deltas:
        s = state.apply(d)
        ins += s.inserted
        dels += s.deleted
        reps += s.replaced
    return ChangeSummary(ins, dels, reps)
