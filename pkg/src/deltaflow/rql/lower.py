"""Lowering from type-annotated queries to executable physical plans.

The pass walks the annotated AST bottom-up, tracking how each intermediate
stream is partitioned and inserting rehash edges where a consumer needs a
different key.  Three shapes are recognised:

* plain selects become scan / select / project chains,
* aggregating selects become (rehash +) group-by, with a projection after
  the group-by when select items wrap aggregates in arithmetic,
* a select that invokes a join-form UDA over a stored relation and the
  recursive relation becomes a handler join whose drive port hangs off the
  fixpoint back edge.

Recursive blocks produce a single fixpoint operator: base query into port 0,
recursive query into port 1, and the back edge feeding the recursive side.
Query parameters are substituted as literals here, so the shipped plan is
self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from deltaflow import core, plan
from deltaflow.errors import RqlTypeError, UnsupportedFeatureError
from deltaflow.rql import ast
from deltaflow.rql.parser import parse
from deltaflow.rql.printer import print_program
from deltaflow.rql.typecheck import Catalog, _lit_type, typecheck

_BIN = {"+": "add", "-": "sub", "*": "mul", "/": "div",
        "<": "lt", "<=": "le", ">": "gt", ">=": "ge",
        "=": "eq", "<>": "ne", "and": "and", "or": "or"}


@dataclass
class _Stream:
    """An operator output during lowering."""

    op: int
    schema: core.Schema
    part: Optional[tuple]   # output columns the stream is partitioned by
    backedge: bool = False  # stream is the fixpoint release path


def _unique_schema(fields):
    used = {}
    out = []
    for name, t in fields:
        if name in used:
            used[name] += 1
            name = f"{name}_{used[name]}"
        else:
            used[name] = 1
        out.append((name, t))
    return core.Schema(out)


class _Lowerer:
    def __init__(self, program, catalog: Catalog, params, no_delta):
        self.program = program
        self.catalog = catalog
        self.params = dict(params or {})
        self.no_delta = bool(no_delta)
        self.b = plan.PlanBuilder(params=self.params)
        self.fix_name = None
        self.fix_schema = None
        self.fix_key = None
        self.fix_op = None
        self.fix_params = None  # live params dict of the fixpoint OpSpec

    # -- expression trees ---------------------------------------------------
    def tree(self, node):
        if isinstance(node, ast.Lit):
            return ["lit", node.value]
        if isinstance(node, ast.Col):
            if node.t_param:
                try:
                    return ["lit", self.params[node.name]]
                except KeyError:
                    raise RqlTypeError(
                        f"missing value for parameter {node.name!r}") \
                        from None
            return ["col", node.t_index]
        if isinstance(node, ast.Un):
            return ["not" if node.op == "not" else "neg",
                    self.tree(node.operand)]
        if isinstance(node, ast.Bin):
            return [_BIN[node.op], self.tree(node.left),
                    self.tree(node.right)]
        raise UnsupportedFeatureError(
            f"cannot lower {type(node).__name__} here")

    # -- helpers --------------------------------------------------------------
    def uda_params(self, defn):
        resolved = dict(defn.params)
        for name in resolved:
            if name in self.params:
                resolved[name] = self.params[name]
        if self.no_delta and "theta" in resolved:
            resolved["theta"] = 0.0
        return resolved

    def connect(self, stream: _Stream, dst, port, want_key=None, schema=None):
        """Wire ``stream`` into ``dst``; rehash when the consumer needs keys
        the stream is not already partitioned by."""
        schema = schema if schema is not None else stream.schema
        if stream.backedge:
            transfer, key = plan.BACKEDGE, ()
        elif want_key is None or stream.part == tuple(want_key):
            transfer, key = plan.LOCAL, ()
        else:
            transfer, key = plan.REHASH, tuple(want_key)
        self.b.connect(stream.op, dst, schema, port=port,
                       transfer=transfer, key=key)

    def scan(self, name) -> _Stream:
        schema = self.catalog.schema(name)
        op = self.b.add_op("scan", relation=name, key=[0])
        return _Stream(op, schema, (0,))

    def source_stream(self, f) -> _Stream:
        if isinstance(f, ast.TableRef):
            if f.name == self.fix_name:
                return _Stream(self.fix_op, self.fix_schema,
                               (self.fix_key,), backedge=True)
            return self.scan(f.name)
        return self.lower_select(f.query)

    def drive_col(self, col: ast.Col, drive_idx, equiv, what):
        """Map a column (possibly resolved to the storage side through a
        join equivalence) onto the drive relation."""
        if col.t_source == drive_idx:
            return col.t_col
        pos = (col.t_source, col.t_col)
        for cls in equiv:
            if pos in cls:
                for si, ci in cls:
                    if si == drive_idx:
                        return ci
        raise RqlTypeError(
            f"{what} {col.name!r} must come from the recursive relation")

    # -- select shapes ---------------------------------------------------------
    def lower_select(self, sel: ast.Select) -> _Stream:
        handler_items = [it for it in sel.items
                         if isinstance(it.expr, ast.Call)
                         and it.expr.t_kind == "handler"]
        if handler_items:
            return self.lower_handler(sel, handler_items)

        if len(sel.froms) == 1:
            stream = self.source_stream(sel.froms[0])
            preds = list(sel.where)
        elif len(sel.froms) == 2:
            stream, preds = self.lower_join(sel)
        else:
            raise UnsupportedFeatureError(
                "SELECT over more than two relations")

        if preds:
            stream = self.add_filter(stream, preds)
        if sel.t_aggregate:
            return self.lower_groupby(sel, stream)
        return self.lower_project(sel, stream)

    def add_filter(self, stream: _Stream, preds) -> _Stream:
        node = self.tree(preds[0])
        for p in preds[1:]:
            node = ["and", node, self.tree(p)]
        op = self.b.add_op("select", pred=node)
        self.connect(stream, op, 0)
        return _Stream(op, stream.schema, stream.part)

    def lower_project(self, sel: ast.Select, stream: _Stream) -> _Stream:
        exprs = [self.tree(it.expr) for it in sel.items]
        op = self.b.add_op("project", exprs=exprs)
        self.connect(stream, op, 0)
        part = self._map_part(stream.part, sel.items)
        return _Stream(op, sel.t_schema, part)

    @staticmethod
    def _map_part(part, items):
        """Where do the input partition columns land in the projected row?"""
        if part is None:
            return None
        out = []
        for p in part:
            for j, it in enumerate(items):
                e = it.expr
                if isinstance(e, ast.Col) and not e.t_param \
                        and e.t_index == p:
                    out.append(j)
                    break
            else:
                return None
        return tuple(out)

    def lower_join(self, sel: ast.Select):
        left = self.source_stream(sel.froms[0])
        right = self.source_stream(sel.froms[1])
        join_preds, rest = [], []
        for p in sel.where:
            if p.op == "=" and isinstance(p.left, ast.Col) \
                    and isinstance(p.right, ast.Col) \
                    and not p.left.t_param and not p.right.t_param \
                    and p.left.t_source != p.right.t_source:
                join_preds.append(p)
            else:
                rest.append(p)
        if not join_preds:
            raise UnsupportedFeatureError("joins must have an equality "
                                          "predicate")
        lcols, rcols = [], []
        for p in join_preds:
            a, b = p.left, p.right
            if a.t_source == 1:
                a, b = b, a
            lcols.append(a.t_col)
            rcols.append(b.t_col)
        for side, cols in ((left, lcols), (right, rcols)):
            if side.backedge and tuple(cols) != (self.fix_key,):
                raise UnsupportedFeatureError(
                    "the recursive relation must join on its BY column")
        op = self.b.add_op("hashjoin", keys=[list(lcols), list(rcols)])
        self.connect(left, op, 0, want_key=tuple(lcols))
        self.connect(right, op, 1, want_key=tuple(rcols))
        schema = _unique_schema(left.schema.fields + right.schema.fields)
        part = tuple(lcols)
        return _Stream(op, schema, part), rest

    # -- aggregation -------------------------------------------------------
    @staticmethod
    def _calls_in(expr, acc):
        if isinstance(expr, ast.Call):
            acc.append(expr)
        elif isinstance(expr, ast.Bin):
            _Lowerer._calls_in(expr.left, acc)
            _Lowerer._calls_in(expr.right, acc)
        elif isinstance(expr, ast.Un):
            _Lowerer._calls_in(expr.operand, acc)
        return acc

    def lower_groupby(self, sel: ast.Select, stream: _Stream) -> _Stream:
        keys_in = [c.t_index for c in sel.t_group_cols]
        shift = 0
        if not keys_in:
            # Global aggregate: prefix a constant key so one worker owns the
            # single group, then drop it afterwards.
            exprs = [["lit", 0]] + [["col", i]
                                    for i in range(stream.schema.arity)]
            op = self.b.add_op("project", exprs=exprs)
            self.connect(stream, op, 0)
            schema = _unique_schema((("g", core.INT64),)
                                    + stream.schema.fields)
            stream = _Stream(op, schema, None)
            keys_in = [0]
            shift = 1

        calls = []
        for it in sel.items:
            self._calls_in(it.expr, calls)
        agg_specs = []
        call_base = {}
        pos = len(keys_in)
        out_fields = [stream.schema.fields[i] for i in keys_in]
        for call in calls:
            agg_specs.append({
                "fn": call.fname,
                "args": [c + shift for c in call.t_arg_cols],
                "types": [plan.type_name(t) for t in call.t_arg_types],
                "params": self.uda_params(call.t_defn),
            })
            call_base[id(call)] = pos
            pos += len(call.t_out_fields)
            out_fields.extend(call.t_out_fields)

        gb = self.b.add_op("groupby", key=list(keys_in), aggs=agg_specs,
                           per_stratum=self.no_delta)
        self.connect(stream, gb, 0, want_key=tuple(keys_in))
        gb_schema = _unique_schema(out_fields)
        gb_stream = _Stream(gb, gb_schema, tuple(range(len(keys_in))))

        key_pos = {k: i for i, k in enumerate(keys_in)}

        def rewrite(e):
            if isinstance(e, ast.Call):
                return ["col", call_base[id(e)]]
            if isinstance(e, ast.Col):
                if e.t_param:
                    return ["lit", self.params[e.name]]
                return ["col", key_pos[e.t_index]]
            if isinstance(e, ast.Bin):
                return [_BIN[e.op], rewrite(e.left), rewrite(e.right)]
            if isinstance(e, ast.Un):
                return ["not" if e.op == "not" else "neg",
                        rewrite(e.operand)]
            return self.tree(e)

        exprs = []
        for it in sel.items:
            e = it.expr
            if isinstance(e, ast.Call) and e.destructure:
                base = call_base[id(e)]
                exprs.extend(["col", base + i]
                             for i in range(len(e.t_out_fields)))
            else:
                exprs.append(rewrite(e))
        identity = [["col", i] for i in range(gb_schema.arity)]
        if exprs == identity and not shift:
            return _Stream(gb, sel.t_schema, gb_stream.part)
        op = self.b.add_op("project", exprs=exprs)
        self.connect(gb_stream, op, 0)
        part = None
        if not shift:
            # group keys that survive the projection keep their partitioning
            mapped = []
            for i in range(len(keys_in)):
                hits = [j for j, e in enumerate(exprs) if e == ["col", i]]
                if not hits:
                    mapped = None
                    break
                mapped.append(hits[0])
            part = tuple(mapped) if mapped is not None else None
        return _Stream(op, sel.t_schema, part)

    # -- handler joins -------------------------------------------------------
    def lower_handler(self, sel: ast.Select, handler_items) -> _Stream:
        if len(handler_items) != 1:
            raise UnsupportedFeatureError(
                "one join-form UDA per SELECT")
        call = handler_items[0].expr
        if not call.destructure:
            raise RqlTypeError(
                f"{call.fname} must be destructured with .{{...}}")
        if self.fix_name is None:
            raise UnsupportedFeatureError(
                f"{call.fname} is only usable inside a recursive query")
        if len(sel.froms) != 2:
            raise UnsupportedFeatureError(
                f"{call.fname} needs a stored relation and the recursive "
                "relation")
        drive_idx = None
        for i, f in enumerate(sel.froms):
            if isinstance(f, ast.TableRef) and f.name == self.fix_name:
                drive_idx = i
        if drive_idx is None:
            raise UnsupportedFeatureError(
                f"{call.fname} must read {self.fix_name!r} directly")
        storage_idx = 1 - drive_idx
        storage = self.source_stream(sel.froms[storage_idx])
        if storage.backedge:
            raise UnsupportedFeatureError(
                "both join inputs cannot be recursive")

        equiv = [{(s, c) for s, c in cls} for cls in sel.t_equiv]
        join, extra = None, []
        for p in sel.where:
            if p.op == "=" and isinstance(p.left, ast.Col) \
                    and isinstance(p.right, ast.Col) \
                    and not p.left.t_param and not p.right.t_param \
                    and p.left.t_source != p.right.t_source:
                if join is not None:
                    raise UnsupportedFeatureError(
                        "handler joins take one equality predicate")
                join = p
            else:
                extra.append(p)
        if extra:
            raise UnsupportedFeatureError(
                "handler joins only support the join predicate")

        if join is not None:
            a, b = join.left, join.right
            if a.t_source == drive_idx:
                a, b = b, a
            storage_col, d_col = a.t_col, b.t_col
            if d_col != self.fix_key:
                raise UnsupportedFeatureError(
                    "the recursive relation must join on its BY column")
            release = "local"
        else:
            storage_col = storage.part[0] if storage.part else 0
            d_col = None
            release = "broadcast"

        args = [self.drive_col(a, drive_idx, equiv,
                               f"argument of {call.fname}")
                for a in call.args]
        passthrough = []
        seen_call = False
        for it in sel.items:
            if it.expr is call:
                seen_call = True
                continue
            if seen_call:
                raise UnsupportedFeatureError(
                    f"columns must precede {call.fname} in the SELECT list")
            if not isinstance(it.expr, ast.Col):
                raise UnsupportedFeatureError(
                    f"only plain columns may accompany {call.fname}")
            passthrough.append(self.drive_col(it.expr, drive_idx, equiv,
                                              "column"))
        if len(sel.t_group_cols) != 1:
            raise UnsupportedFeatureError(
                f"{call.fname} needs GROUP BY on the join column")
        g_col = self.drive_col(sel.t_group_cols[0], drive_idx, equiv,
                               "GROUP BY column")
        drive_key = d_col if d_col is not None else g_col

        op = self.b.add_op(
            "handlerjoin",
            handler=call.fname,
            storage_key=[storage_col],
            drive_key=[drive_key],
            args=list(args),
            passthrough=list(passthrough),
            params=self.uda_params(call.t_defn),
            reset_each_stratum=self.no_delta,
        )
        self.connect(storage, op, 0, want_key=(storage_col,))
        drive = _Stream(self.fix_op, self.fix_schema, (self.fix_key,),
                        backedge=True)
        self.connect(drive, op, 1)
        self.fix_params["release"] = release
        return _Stream(op, sel.t_schema, None)

    # -- coercion into a declared schema -------------------------------------
    def coerce(self, stream: _Stream, target: core.Schema) -> _Stream:
        if stream.schema.types == target.types:
            return stream
        exprs = []
        for i, (have, want) in enumerate(zip(stream.schema.types,
                                             target.types)):
            col = ["col", i]
            if have == core.INT64 and want == core.FLOAT64:
                col = ["add", ["lit", 0.0], col]
            exprs.append(col)
        op = self.b.add_op("project", exprs=exprs)
        self.connect(stream, op, 0)
        return _Stream(op, target, stream.part)

    # -- blocks ----------------------------------------------------------------
    def lower_with(self, block: ast.WithBlock):
        schema = block.t_schema
        by = block.t_by_col
        base = self.lower_select(block.base)
        base = self.coerce(base, schema)

        gate = None
        if block.gate is not None:
            g = block.gate
            gate = {"fn": g.fname, "col": g.t_col, "cmp": g.cmp,
                    "lit": g.literal,
                    "type": plan.type_name(g.t_arg_type)}
        # Full re-evaluation plans terminate on the consecutive-iteration
        # convergence test instead of bitwise state equality: a float
        # iteration's last bits can oscillate forever, so the admission
        # check absorbs changes within the query's threshold parameter.
        admit_theta = 0.0
        if self.no_delta:
            admit_theta = float(self.params.get("theta", 0.0))
        fx = self.b.add_op("fixpoint", key=[by], gate=gate,
                           union_all=block.union_all, release="local",
                           admit_theta=admit_theta)
        self.fix_params = self.b.ops[-1].params
        self.connect(base, fx, 0, want_key=(by,), schema=schema)

        self.fix_name = block.name
        self.fix_schema = schema
        self.fix_key = by
        self.fix_op = fx
        rec = self.lower_select(block.recursive)
        rec = self.coerce(rec, schema)
        self.connect(rec, fx, 1, want_key=(by,), schema=schema)
        return fx, schema

    def run(self) -> plan.PhysicalPlan:
        block = self.program.block
        if isinstance(block, ast.WithBlock):
            result_op, schema = self.lower_with(block)
        else:
            stream = self.lower_select(block)
            result_op, schema = stream.op, block.t_schema
        return self.b.build(result_op, schema, no_delta=self.no_delta)


def _param_types(params):
    return {name: _lit_type(value) for name, value in (params or {}).items()}


def compile_program(source, catalog: Catalog, params=None,
                    no_delta=False) -> plan.PhysicalPlan:
    """Compile query text (or a parsed program) into a physical plan,
    substituting ``params`` values as literals."""
    program = parse(source) if isinstance(source, str) else source
    typecheck(program, catalog, _param_types(params))
    return _Lowerer(program, catalog, params, no_delta).run()


def to_logical(source, catalog: Catalog, params=None):
    """A compact, serializable description of the checked query; used by
    explain output and tests."""
    program = parse(source) if isinstance(source, str) else source
    typecheck(program, catalog, _param_types(params))

    def describe_select(sel):
        out = {
            "from": [f.name if isinstance(f, ast.TableRef)
                     else describe_select(f.query) for f in sel.froms],
            "columns": list(sel.t_schema.names),
        }
        if sel.where:
            out["where"] = len(sel.where)
        if sel.t_group_cols:
            out["group_by"] = [c.name for c in sel.t_group_cols]
        if sel.t_aggregate:
            calls = []
            for it in sel.items:
                _Lowerer._calls_in(it.expr, calls)
            out["aggregates"] = [c.fname for c in calls]
        return out

    block = program.block
    if isinstance(block, ast.WithBlock):
        return {
            "recursive": block.name,
            "columns": list(block.t_schema.names),
            "by": block.by_key,
            "until": "fixpoint" if block.gate is None else
                     f"{block.gate.fname}({block.gate.arg}) "
                     f"{block.gate.cmp} {block.gate.literal!r}",
            "base": describe_select(block.base),
            "step": describe_select(block.recursive),
        }
    return describe_select(block)


def explain(source, catalog: Catalog, params=None, no_delta=False) -> str:
    """Deterministic plan rendering: canonical query text, then one line
    per physical operator."""
    program = parse(source) if isinstance(source, str) else source
    physical = compile_program(program, catalog, params, no_delta)
    return print_program(program) + "\n--\n" + physical.describe()
