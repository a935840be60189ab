"""Physical plans: a serializable operator graph plus expression trees.

A plan is what the requestor sends to every worker.  It carries operator
descriptors, typed edge descriptors (including how each edge moves data:
locally, rehashed by key, broadcast, or along the recursive back edge), the
schema table used to decode data frames, and query parameters.  Expressions
(predicates, projections, gate conditions) are little JSON trees compiled to
closures on arrival.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from deltaflow import core
from deltaflow.errors import PlanError

# Edge transfer kinds
LOCAL = "local"          # same-worker pipe; partitioning already agrees
REHASH = "rehash"        # route each delta to the owner of its key
BROADCAST = "broadcast"  # every worker receives every delta
BACKEDGE = "backedge"    # fixpoint release path (local or broadcast)

TRANSFERS = (LOCAL, REHASH, BROADCAST, BACKEDGE)

OP_KINDS = ("scan", "select", "project", "hashjoin", "handlerjoin",
            "depjoin", "groupby", "preagg", "fixpoint")

_TYPE_NAMES = {core.INT64: "int64", core.FLOAT64: "float64",
               core.STRING: "string", core.BOOL: "bool"}
_TYPES_BY_NAME = {v: k for k, v in _TYPE_NAMES.items()}


def type_name(t) -> str:
    return _TYPE_NAMES[t]


def type_from_name(name: str):
    try:
        return _TYPES_BY_NAME[name]
    except KeyError:
        raise PlanError(f"unknown type name {name!r}") from None


# ---------------------------------------------------------------------------
# Expression trees
#
# ["col", i] ["lit", v]
# ["add"|"sub"|"mul"|"div", a, b]   ["neg", a] ["abs", a]
# ["lt"|"le"|"gt"|"ge"|"eq"|"ne", a, b]
# ["and", a, b] ["or", a, b] ["not", a]

def compile_expr(node):
    """Compile an expression tree to a row -> value closure."""
    if not isinstance(node, (list, tuple)) or not node:
        raise PlanError(f"malformed expression node {node!r}")
    op = node[0]
    if op == "col":
        i = node[1]
        if not isinstance(i, int) or i < 0:
            raise PlanError(f"bad column index {i!r}")
        return lambda row: row[i]
    if op == "lit":
        v = node[1]
        return lambda row: v
    if op in ("neg", "abs", "not"):
        a = compile_expr(node[1])
        if op == "neg":
            return lambda row: -a(row)
        if op == "abs":
            return lambda row: abs(a(row))
        return lambda row: not a(row)
    if len(node) != 3:
        raise PlanError(f"operator {op!r} expects two operands")
    a = compile_expr(node[1])
    b = compile_expr(node[2])
    fns = {
        "add": lambda row: a(row) + b(row),
        "sub": lambda row: a(row) - b(row),
        "mul": lambda row: a(row) * b(row),
        "div": lambda row: a(row) / b(row),
        "lt": lambda row: a(row) < b(row),
        "le": lambda row: a(row) <= b(row),
        "gt": lambda row: a(row) > b(row),
        "ge": lambda row: a(row) >= b(row),
        "eq": lambda row: a(row) == b(row),
        "ne": lambda row: a(row) != b(row),
        "and": lambda row: a(row) and b(row),
        "or": lambda row: a(row) or b(row),
    }
    try:
        return fns[op]
    except KeyError:
        raise PlanError(f"unknown expression operator {op!r}") from None


def compile_row(nodes):
    """Compile a list of expression trees to a row -> tuple closure."""
    fns = [compile_expr(n) for n in nodes]
    return lambda row: tuple(f(row) for f in fns)


def expr_columns(node, acc=None):
    """Column indices referenced by an expression tree."""
    if acc is None:
        acc = set()
    if node[0] == "col":
        acc.add(node[1])
    elif node[0] != "lit":
        for child in node[1:]:
            expr_columns(child, acc)
    return acc


# ---------------------------------------------------------------------------
# Plan graph


@dataclass
class OpSpec:
    op_id: int
    kind: str
    params: dict = field(default_factory=dict)

    def to_json(self):
        return {"id": self.op_id, "kind": self.kind, "params": self.params}

    @staticmethod
    def from_json(obj):
        return OpSpec(obj["id"], obj["kind"], obj.get("params", {}))


@dataclass
class EdgeSpec:
    edge_id: int
    src: int               # producing op
    dst: int               # consuming op
    port: int              # input port at dst
    transfer: str
    schema_id: int
    key: tuple = ()        # partition-key columns for rehash routing

    def to_json(self):
        return {"id": self.edge_id, "src": self.src, "dst": self.dst,
                "port": self.port, "transfer": self.transfer,
                "schema": self.schema_id, "key": list(self.key)}

    @staticmethod
    def from_json(obj):
        return EdgeSpec(obj["id"], obj["src"], obj["dst"], obj["port"],
                        obj["transfer"], obj["schema"],
                        tuple(obj.get("key", ())))


class PhysicalPlan:
    """The full executable description of one query."""

    def __init__(self, schemas, ops, edges, result_op, result_schema_id,
                 params=None, no_delta=False):
        self.schemas = dict(schemas)   # schema_id -> core.Schema
        self.ops = list(ops)
        self.edges = list(edges)
        self.result_op = result_op
        self.result_schema_id = result_schema_id
        self.params = dict(params or {})
        self.no_delta = bool(no_delta)
        self._by_id = {op.op_id: op for op in self.ops}
        self.validate()

    # -- queries ----------------------------------------------------------
    def op(self, op_id) -> OpSpec:
        return self._by_id[op_id]

    def edges_from(self, op_id):
        return [e for e in self.edges if e.src == op_id]

    def edges_into(self, op_id):
        return [e for e in self.edges if e.dst == op_id]

    def edge(self, edge_id) -> EdgeSpec:
        for e in self.edges:
            if e.edge_id == edge_id:
                return e
        raise PlanError(f"no edge {edge_id}")

    def schema(self, schema_id) -> core.Schema:
        return self.schemas[schema_id]

    def schema_tags(self, schema_id) -> bytes:
        return self.schemas[schema_id].tags

    def fixpoint_ops(self):
        return [op for op in self.ops if op.kind == "fixpoint"]

    def scan_ops(self):
        return [op for op in self.ops if op.kind == "scan"]

    # -- validation -------------------------------------------------------
    _N_INPUTS = {"scan": 0, "select": 1, "project": 1, "hashjoin": 2,
                 "handlerjoin": 2, "depjoin": 1, "groupby": 1, "preagg": 1,
                 "fixpoint": 2}

    def validate(self):
        ids = [op.op_id for op in self.ops]
        if len(set(ids)) != len(ids):
            raise PlanError("duplicate operator ids")
        if len({e.edge_id for e in self.edges}) != len(self.edges):
            raise PlanError("duplicate edge ids")
        for op in self.ops:
            if op.kind not in OP_KINDS:
                raise PlanError(f"unknown operator kind {op.kind!r}")
        for e in self.edges:
            if e.src not in self._by_id or e.dst not in self._by_id:
                raise PlanError(f"edge {e.edge_id} references a missing op")
            if e.transfer not in TRANSFERS:
                raise PlanError(f"edge {e.edge_id}: bad transfer {e.transfer!r}")
            if e.schema_id not in self.schemas:
                raise PlanError(f"edge {e.edge_id}: unknown schema {e.schema_id}")
            if e.transfer == REHASH and not e.key:
                raise PlanError(f"edge {e.edge_id}: rehash without a key")
            n = self._N_INPUTS[self._by_id[e.dst].kind]
            if not (0 <= e.port < n):
                raise PlanError(
                    f"edge {e.edge_id}: port {e.port} out of range for "
                    f"{self._by_id[e.dst].kind}")
        for op in self.ops:
            need = self._N_INPUTS[op.kind]
            got = sorted(e.port for e in self.edges_into(op.op_id))
            if got != list(range(need)):
                raise PlanError(
                    f"op {op.op_id} ({op.kind}) has input ports {got}, "
                    f"needs exactly {list(range(need))}")
        if self.result_op not in self._by_id:
            raise PlanError("result op missing")
        if self.result_schema_id not in self.schemas:
            raise PlanError("result schema missing")
        if len(self.fixpoint_ops()) > 1:
            raise PlanError("at most one recursive region per plan")
        for op in self.fixpoint_ops():
            back = [e for e in self.edges_from(op.op_id)
                    if e.transfer == BACKEDGE]
            if len(back) != 1:
                raise PlanError("fixpoint needs exactly one back edge")
        self._check_acyclic_outside_backedges()

    def _check_acyclic_outside_backedges(self):
        adj = {}
        for e in self.edges:
            if e.transfer != BACKEDGE:
                adj.setdefault(e.src, []).append(e.dst)
        seen, stack = set(), set()

        def visit(v):
            if v in stack:
                raise PlanError("cycle outside the recursive back edge")
            if v in seen:
                return
            stack.add(v)
            for w in adj.get(v, ()):
                visit(w)
            stack.discard(v)
            seen.add(v)

        for op in self.ops:
            visit(op.op_id)

    # -- serialization ----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "schemas": [{"id": sid,
                         "fields": [[n, type_name(t)]
                                    for n, t in schema.fields]}
                        for sid, schema in sorted(self.schemas.items())],
            "ops": [op.to_json() for op in self.ops],
            "edges": [e.to_json() for e in self.edges],
            "result_op": self.result_op,
            "result_schema": self.result_schema_id,
            "params": self.params,
            "no_delta": self.no_delta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @staticmethod
    def from_json(obj) -> "PhysicalPlan":
        schemas = {}
        for s in obj["schemas"]:
            fields = [(n, type_from_name(t)) for n, t in s["fields"]]
            schemas[s["id"]] = core.Schema(fields)
        return PhysicalPlan(
            schemas,
            [OpSpec.from_json(o) for o in obj["ops"]],
            [EdgeSpec.from_json(e) for e in obj["edges"]],
            obj["result_op"], obj["result_schema"],
            obj.get("params", {}), obj.get("no_delta", False))

    @staticmethod
    def loads(text: str) -> "PhysicalPlan":
        return PhysicalPlan.from_json(json.loads(text))

    def describe(self) -> str:
        """Deterministic one-op-per-line rendering for explain output."""
        lines = []
        for op in self.ops:
            ins = self.edges_into(op.op_id)
            src = ",".join(f"{e.src}@{e.transfer}"
                           f"{'(' + ','.join(map(str, e.key)) + ')' if e.key else ''}"
                           for e in sorted(ins, key=lambda e: e.port))
            params = json.dumps(op.params, sort_keys=True)
            lines.append(f"#{op.op_id} {op.kind}"
                         f"{' <- ' + src if src else ''} {params}")
        lines.append(f"result: #{self.result_op} "
                     f"schema {self.result_schema_id}")
        return "\n".join(lines)


class PlanBuilder:
    """Incremental construction helper used by the query frontend."""

    def __init__(self, params=None):
        self.schemas = {}
        self._schema_ids = {}
        self.ops = []
        self.edges = []
        self.params = dict(params or {})
        self._next_op = 0
        self._next_edge = 0

    def schema_id(self, schema: core.Schema) -> int:
        key = tuple(schema.fields)
        if key not in self._schema_ids:
            sid = len(self.schemas)
            self.schemas[sid] = schema
            self._schema_ids[key] = sid
        return self._schema_ids[key]

    def add_op(self, kind, **params) -> int:
        op_id = self._next_op
        self._next_op += 1
        self.ops.append(OpSpec(op_id, kind, params))
        return op_id

    def connect(self, src, dst, schema, port=0, transfer=LOCAL, key=()):
        eid = self._next_edge
        self._next_edge += 1
        self.edges.append(EdgeSpec(eid, src, dst, port, transfer,
                                   self.schema_id(schema), tuple(key)))
        return eid

    def build(self, result_op, result_schema, no_delta=False) -> PhysicalPlan:
        return PhysicalPlan(self.schemas, self.ops, self.edges, result_op,
                            self.schema_id(result_schema), self.params,
                            no_delta)
