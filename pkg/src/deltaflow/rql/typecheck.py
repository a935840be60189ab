"""Name resolution and type checking for parsed queries.

Annotates the AST in place with ``t_``-prefixed fields consumed by the
lowering pass:

* every expression gets ``t_type``
* columns get ``t_source`` (FROM position), ``t_col`` (index within that
  source), ``t_index`` (index in the concatenated input layout), and
  ``t_param`` for names bound to query parameters
* calls get ``t_defn`` (registry entry), ``t_kind`` (``"aggregate"`` for
  scalar/table aggregates, ``"handler"`` for join handlers), resolved
  ``t_out_fields`` and ``t_arg_cols``
* selects get ``t_schema``, ``t_sources``, ``t_aggregate`` and
  ``t_uses_recursive``

Recursive blocks are typed by unifying the base and recursive branch
column types, widening int64 to float64 where the branches disagree and
re-checking until the schema is stable.
"""

from __future__ import annotations

from deltaflow import core, uda
from deltaflow.errors import RqlTypeError
from deltaflow.rql import ast

_NUMERIC = (core.INT64, core.FLOAT64)
_CMP_OPS = ("<", "<=", ">", ">=", "=", "<>")


class Catalog:
    """Base relations visible to queries, plus the UDA registry."""

    def __init__(self, relations=None, registry=None):
        self._relations = dict(relations or {})
        self.registry = registry if registry is not None else uda.registry

    def add(self, name, schema):
        self._relations[name] = schema
        return self

    def has(self, name):
        return name in self._relations

    def schema(self, name) -> core.Schema:
        try:
            return self._relations[name]
        except KeyError:
            raise RqlTypeError(f"unknown relation {name!r}") from None

    def names(self):
        return sorted(self._relations)


def _lit_type(value):
    if isinstance(value, bool):
        return core.BOOL
    if isinstance(value, int):
        return core.INT64
    if isinstance(value, float):
        return core.FLOAT64
    if isinstance(value, str):
        return core.STRING
    raise RqlTypeError(f"unsupported literal {value!r}")


def _unify(a, b):
    if a == b:
        return a
    if a in _NUMERIC and b in _NUMERIC:
        return core.FLOAT64
    return None


class _Checker:
    def __init__(self, catalog: Catalog, params=None):
        self.catalog = catalog
        self.registry = catalog.registry
        self.params = dict(params or {})
        self.with_name = None
        self.with_schema = None
        self._equiv = []  # column equivalence classes of the current select

    # -- column resolution -------------------------------------------------
    def _sources(self, sel: ast.Select):
        sources = []
        for f in sel.froms:
            if isinstance(f, ast.TableRef):
                if self.with_name is not None and f.name == self.with_name:
                    sources.append((f.name, self.with_schema, True))
                else:
                    sources.append((f.name, self.catalog.schema(f.name),
                                    False))
            else:
                self.check_select(f.query)
                sources.append((None, f.query.t_schema,
                                f.query.t_uses_recursive))
        return sources

    def _resolve_col(self, col: ast.Col, sources):
        if col.qualifier is not None:
            for si, (name, schema, _) in enumerate(sources):
                if name == col.qualifier:
                    if not schema.has(col.name):
                        raise RqlTypeError(
                            f"relation {name!r} has no column {col.name!r}")
                    ci = schema.col(col.name)
                    self._bind(col, sources, si, ci, schema.types[ci])
                    return
            raise RqlTypeError(f"unknown relation {col.qualifier!r} in "
                               f"{col.qualifier}.{col.name}")
        hits = [(si, schema.col(col.name), schema.types[schema.col(col.name)])
                for si, (_, schema, _) in enumerate(sources)
                if schema.has(col.name)]
        if len(hits) > 1:
            # A name appearing in several relations is still unambiguous if
            # the WHERE clause equates all its occurrences.
            positions = {(si, ci) for si, ci, _ in hits}
            if not any(positions <= cls for cls in self._equiv):
                raise RqlTypeError(f"ambiguous column {col.name!r}")
            hits = hits[:1]
        if len(hits) == 1:
            si, ci, t = hits[0]
            self._bind(col, sources, si, ci, t)
            return
        if col.name in self.params:
            col.t_param = True
            col.t_source = col.t_col = col.t_index = None
            col.t_type = self.params[col.name]
            return
        raise RqlTypeError(f"unknown column {col.name!r}")

    @staticmethod
    def _bind(col, sources, si, ci, t):
        col.t_param = False
        col.t_source = si
        col.t_col = ci
        col.t_index = sum(s.arity for _, s, _ in sources[:si]) + ci
        col.t_type = t

    # -- expressions ---------------------------------------------------------
    def check_expr(self, node, sources, allow_agg):
        if isinstance(node, ast.Lit):
            node.t_type = _lit_type(node.value)
            return node.t_type
        if isinstance(node, ast.Col):
            self._resolve_col(node, sources)
            return node.t_type
        if isinstance(node, ast.Un):
            t = self.check_expr(node.operand, sources, allow_agg)
            if node.op == "-":
                if t not in _NUMERIC:
                    raise RqlTypeError(f"cannot negate {t}")
                node.t_type = t
            else:  # not
                if t != core.BOOL:
                    raise RqlTypeError(f"NOT needs bool, got {t}")
                node.t_type = core.BOOL
            return node.t_type
        if isinstance(node, ast.Bin):
            lt = self.check_expr(node.left, sources, allow_agg)
            rt = self.check_expr(node.right, sources, allow_agg)
            op = node.op
            if op in ("+", "-", "*", "/"):
                if lt not in _NUMERIC or rt not in _NUMERIC:
                    raise RqlTypeError(f"arithmetic {op!r} needs numbers, "
                                       f"got {lt} and {rt}")
                node.t_type = (core.FLOAT64 if op == "/"
                               else _unify(lt, rt))
            elif op in _CMP_OPS:
                if _unify(lt, rt) is None:
                    raise RqlTypeError(f"cannot compare {lt} with {rt}")
                node.t_type = core.BOOL
            elif op in ("and", "or"):
                if lt != core.BOOL or rt != core.BOOL:
                    raise RqlTypeError(f"{op.upper()} needs bool operands")
                node.t_type = core.BOOL
            else:
                raise RqlTypeError(f"unknown operator {op!r}")
            return node.t_type
        if isinstance(node, ast.Call):
            if not allow_agg:
                raise RqlTypeError(
                    f"{node.fname} is not allowed in this context")
            return self._check_call(node, sources)
        raise RqlTypeError(f"unexpected expression node {type(node).__name__}")

    def _check_call(self, call: ast.Call, sources):
        defn = self.registry.lookup(call.fname)
        call.t_defn = defn
        call.t_kind = "handler" if defn.make_join_handler else "aggregate"
        if call.star:
            if call.fname != "count":
                raise RqlTypeError(f"{call.fname}(*) is not supported")
            call.t_arg_cols = ()
            call.t_arg_types = ()
        else:
            if len(call.args) != len(defn.in_types):
                raise RqlTypeError(
                    f"{call.fname} takes {len(defn.in_types)} argument(s), "
                    f"got {len(call.args)}")
            arg_types = []
            for arg, want in zip(call.args, defn.in_types):
                if not isinstance(arg, ast.Col):
                    raise RqlTypeError(
                        f"arguments of {call.fname} must be columns")
                self._resolve_col(arg, sources)
                if arg.t_param:
                    raise RqlTypeError(
                        f"parameter {arg.name!r} cannot be an argument "
                        f"of {call.fname}")
                got = arg.t_type
                if want is None:
                    if got not in _NUMERIC:
                        raise RqlTypeError(
                            f"{call.fname} needs a numeric "
                            f"{arg.name!r}, got {got}")
                elif got != want:
                    raise RqlTypeError(
                        f"{call.fname} argument {arg.name!r} must be "
                        f"{want}, got {got}")
                arg_types.append(got)
            call.t_arg_cols = tuple(a.t_index for a in call.args)
            call.t_arg_types = tuple(arg_types)
        call.t_out_fields = self._out_fields(call, defn)
        self._check_destructure(call)
        if call.destructure:
            call.t_type = None  # expands to multiple columns
        else:
            if len(call.t_out_fields) != 1:
                raise RqlTypeError(
                    f"{call.fname} produces columns "
                    f"{tuple(n for n, _ in call.t_out_fields)}; "
                    "destructure them with .{...}")
            call.t_type = call.t_out_fields[0][1]
        return call.t_type

    def _out_fields(self, call, defn):
        if defn.out_fields:
            poly = next((got for want, got in zip(defn.in_types,
                                                  call.t_arg_types)
                         if want is None), core.INT64)
            return tuple((n, t if t is not None else poly)
                         for n, t in defn.out_fields)
        # derive from an instantiated aggregate
        agg = defn.make_aggregate(*call.t_arg_types)
        return tuple(agg.out_fields)

    @staticmethod
    def _check_destructure(call):
        if not call.destructure:
            return
        declared = tuple(n for n, _ in call.t_out_fields)
        for name in call.destructure:
            if name not in declared:
                raise RqlTypeError(
                    f"{call.fname} has no output column {name!r} "
                    f"(declares {', '.join(declared)})")
        if call.destructure != declared:
            raise RqlTypeError(
                f"destructure of {call.fname} must list "
                f"{', '.join(declared)} in order")

    # -- selects -------------------------------------------------------------
    @staticmethod
    def _has_call(node):
        if isinstance(node, ast.Call):
            return True
        if isinstance(node, ast.Bin):
            return _Checker._has_call(node.left) or \
                _Checker._has_call(node.right)
        if isinstance(node, ast.Un):
            return _Checker._has_call(node.operand)
        return False

    @staticmethod
    def _equivalences(where):
        classes = []
        for pred in where:
            if pred.op != "=" or not isinstance(pred.left, ast.Col) \
                    or not isinstance(pred.right, ast.Col) \
                    or pred.left.t_param or pred.right.t_param:
                continue
            a = (pred.left.t_source, pred.left.t_col)
            b = (pred.right.t_source, pred.right.t_col)
            merged = {a, b}
            rest = []
            for cls in classes:
                if cls & merged:
                    merged |= cls
                else:
                    rest.append(cls)
            classes = rest + [merged]
        return classes

    def check_select(self, sel: ast.Select):
        sources = self._sources(sel)
        sel.t_sources = sources
        sel.t_uses_recursive = any(rec for _, _, rec in sources)

        saved_equiv = self._equiv
        self._equiv = []
        try:
            return self._check_select_body(sel, sources)
        finally:
            self._equiv = saved_equiv

    def _check_select_body(self, sel, sources):
        for pred in sel.where:
            if not (isinstance(pred, ast.Bin) and pred.op in _CMP_OPS):
                raise RqlTypeError("WHERE clauses must be comparisons")
            self.check_expr(pred, sources, allow_agg=False)
        self._equiv = self._equivalences(sel.where)
        sel.t_equiv = self._equiv

        group_cols = []
        for col in sel.group_by:
            self._resolve_col(col, sources)
            if col.t_param:
                raise RqlTypeError(
                    f"cannot group by parameter {col.name!r}")
            group_cols.append(col)
        sel.t_group_cols = tuple(group_cols)

        aggregate = bool(sel.group_by)
        for item in sel.items:
            if self._has_call(item.expr):
                aggregate = True
        sel.t_aggregate = aggregate

        fields = []
        used = {}

        def add_field(name, t):
            base = name
            if base in used:
                used[base] += 1
                name = f"{base}_{used[base]}"
            else:
                used[base] = 1
            fields.append((name, t))

        group_keys = {(c.t_source, c.t_col) for c in group_cols}
        for item in sel.items:
            expr = item.expr
            if isinstance(expr, ast.Call) and expr.destructure:
                if item.alias:
                    raise RqlTypeError(
                        "a destructured call cannot take an alias")
                self.check_expr(expr, sources, allow_agg=True)
                names = dict(expr.t_out_fields)
                item.t_fields = tuple((n, names[n])
                                      for n in expr.destructure)
                for n, t in item.t_fields:
                    add_field(n, t)
                continue
            t = self.check_expr(expr, sources, allow_agg=True)
            if t is None:
                raise RqlTypeError(
                    f"{expr.fname} must be destructured with .{{...}}")
            if aggregate and isinstance(expr, ast.Col) \
                    and not expr.t_param \
                    and (expr.t_source, expr.t_col) not in group_keys:
                raise RqlTypeError(
                    f"column {expr.name!r} must appear in GROUP BY")
            if item.alias:
                name = item.alias
            elif isinstance(expr, ast.Col):
                name = expr.name
            elif isinstance(expr, ast.Call):
                name = expr.t_out_fields[0][0]
            else:
                name = f"col{len(fields) + 1}"
            item.t_fields = ((name, t),)
            add_field(name, t)

        sel.t_schema = core.Schema(fields)
        return sel.t_schema

    # -- programs ------------------------------------------------------------
    def check_gate(self, gate: ast.Gate, with_schema):
        defn = self.registry.lookup(gate.fname)
        if defn.make_aggregate is None:
            raise RqlTypeError(
                f"{gate.fname} cannot be used as a fixpoint condition")
        gate.t_defn = defn
        if gate.arg in ("changed", "*"):
            if gate.fname != "count":
                raise RqlTypeError(
                    f"{gate.fname}({gate.arg}) is not supported; "
                    "only count(changed) counts changed rows")
            gate.t_col = None
            gate.t_arg_type = core.INT64
        else:
            if not with_schema.has(gate.arg):
                raise RqlTypeError(
                    f"fixpoint condition references unknown column "
                    f"{gate.arg!r}")
            gate.t_col = with_schema.col(gate.arg)
            gate.t_arg_type = with_schema.types[gate.t_col]
            if gate.t_arg_type not in _NUMERIC:
                raise RqlTypeError(
                    f"fixpoint condition needs a numeric column, "
                    f"got {gate.t_arg_type}")
        if gate.cmp not in _CMP_OPS:
            raise RqlTypeError(f"bad comparison {gate.cmp!r}")
        if _unify(_lit_type(gate.literal), gate.t_arg_type) is None:
            raise RqlTypeError(
                f"fixpoint condition compares {gate.t_arg_type} "
                f"with {_lit_type(gate.literal)}")

    @classmethod
    def _references(cls, sel, name):
        for f in sel.froms:
            if isinstance(f, ast.TableRef) and f.name == name:
                return True
            if isinstance(f, ast.SubqueryRef) \
                    and cls._references(f.query, name):
                return True
        return False

    def check_block(self, block: ast.WithBlock):
        if self.catalog.has(block.name):
            raise RqlTypeError(
                f"recursive relation {block.name!r} shadows a base relation")
        if self._references(block.base, block.name):
            raise RqlTypeError(
                f"base query cannot reference {block.name!r}")
        base_schema = self.check_select(block.base)
        if base_schema.arity != len(block.columns):
            raise RqlTypeError(
                f"{block.name} declares {len(block.columns)} columns but "
                f"its base query produces {base_schema.arity}")
        types = list(base_schema.types)

        # Iterate until the recursive branch agrees with the declared schema,
        # widening numeric columns as needed.
        for _ in range(3):
            schema = core.Schema(tuple(zip(block.columns, types)))
            self.with_name = block.name
            self.with_schema = schema
            try:
                rec_schema = self.check_select(block.recursive)
            finally:
                self.with_name = None
                self.with_schema = None
            if not block.recursive.t_uses_recursive:
                raise RqlTypeError(
                    f"recursive query never reads {block.name!r}")
            if rec_schema.arity != schema.arity:
                raise RqlTypeError(
                    f"recursive query produces {rec_schema.arity} columns, "
                    f"expected {schema.arity}")
            widened = []
            for have, add in zip(types, rec_schema.types):
                u = _unify(have, add)
                if u is None:
                    raise RqlTypeError(
                        f"recursive query column types {rec_schema.types} "
                        f"do not match {tuple(types)}")
                widened.append(u)
            if widened == types:
                block.t_schema = schema
                if not schema.has(block.by_key):
                    raise RqlTypeError(
                        f"BY column {block.by_key!r} is not a column of "
                        f"{block.name}")
                block.t_by_col = schema.col(block.by_key)
                if block.gate is not None:
                    self.check_gate(block.gate, schema)
                return schema
            types = widened
        raise RqlTypeError(
            f"cannot derive a stable column typing for {block.name}")


def typecheck(program: ast.Program, catalog: Catalog,
              params=None) -> ast.Program:
    """Resolve and type ``program`` against ``catalog``; ``params`` maps
    query parameter names to column types.  Raises RqlTypeError on the
    first problem found, annotating the AST in place otherwise."""
    checker = _Checker(catalog, params)
    if isinstance(program.block, ast.WithBlock):
        program.t_schema = checker.check_block(program.block)
    else:
        program.t_schema = checker.check_select(program.block)
    return program
