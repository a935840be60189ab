"""AST node types for the recursive query language subset.

Nodes are plain dataclasses; the typechecker annotates them in place (fields
prefixed with ``t_``) rather than rebuilding the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


class Expr:
    pass


@dataclass(eq=False)
class Col(Expr):
    """Column reference, optionally qualified as relation.column."""
    name: str
    qualifier: Optional[str] = None
    # typecheck: t_type, t_index (position in the enclosing row layout)

    def key(self):
        return ("col", self.qualifier, self.name)


@dataclass(eq=False)
class Lit(Expr):
    value: object

    def key(self):
        return ("lit", type(self.value).__name__, self.value)


@dataclass(eq=False)
class Bin(Expr):
    op: str  # + - * / and or  < <= > >= = <>
    left: Expr
    right: Expr

    def key(self):
        return ("bin", self.op, self.left.key(), self.right.key())


@dataclass(eq=False)
class Un(Expr):
    op: str  # - not
    operand: Expr

    def key(self):
        return ("un", self.op, self.operand.key())


@dataclass(eq=False)
class Call(Expr):
    """Aggregate or UDA invocation; ``destructure`` carries the `.{a,b}`
    output projection when present.  ``star`` marks count(*)."""
    fname: str
    args: list
    destructure: Optional[tuple] = None
    star: bool = False
    # typecheck: t_defn, t_out_fields, t_types

    def key(self):
        return ("call", self.fname, tuple(a.key() for a in self.args),
                self.destructure, self.star)


@dataclass(eq=False)
class SelectItem:
    expr: Expr
    alias: Optional[str] = None

    def key(self):
        return (self.expr.key(), self.alias)


@dataclass(eq=False)
class TableRef:
    name: str

    def key(self):
        return ("table", self.name)


@dataclass(eq=False)
class SubqueryRef:
    query: "Select"

    def key(self):
        return ("subquery", self.query.key())


@dataclass(eq=False)
class Select:
    items: list
    froms: list
    where: list = field(default_factory=list)   # conjunction of predicates
    group_by: list = field(default_factory=list)  # Col references
    # typecheck: t_schema (output core.Schema)

    def key(self):
        return ("select", tuple(i.key() for i in self.items),
                tuple(f.key() for f in self.froms),
                tuple(w.key() for w in self.where),
                tuple(g.key() for g in self.group_by))


@dataclass(eq=False)
class Gate:
    """Explicit termination: aggregate over each stratum's admitted deltas
    ('changed' or a column of the recursive relation), compared to a
    literal."""
    fname: str
    arg: str          # column name or "changed"
    cmp: str          # < <= > >= = <>
    literal: object

    def key(self):
        return ("gate", self.fname, self.arg, self.cmp, self.literal)


@dataclass(eq=False)
class WithBlock:
    name: str
    columns: list
    base: Select
    union_all: bool
    gate: Optional[Gate]     # None means implicit FIXPOINT termination
    by_key: str
    recursive: Select

    def key(self):
        return ("with", self.name, tuple(self.columns), self.base.key(),
                self.union_all,
                self.gate.key() if self.gate else None,
                self.by_key, self.recursive.key())


@dataclass(eq=False)
class Program:
    block: object  # WithBlock | Select

    def key(self):
        return self.block.key()

    def __eq__(self, other):
        return isinstance(other, Program) and self.key() == other.key()
