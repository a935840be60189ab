"""Canonical text rendering of parsed queries.

Binary expressions are printed fully parenthesized so the output reparses to
a structurally identical tree regardless of operator precedence.
"""

from __future__ import annotations

from deltaflow.rql import ast


def _lit(value):
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, str):
        return "'" + value + "'"
    return repr(value)


def print_expr(node) -> str:
    if isinstance(node, ast.Lit):
        return _lit(node.value)
    if isinstance(node, ast.Col):
        if node.qualifier:
            return f"{node.qualifier}.{node.name}"
        return node.name
    if isinstance(node, ast.Un):
        inner = print_expr(node.operand)
        if node.op == "not":
            return f"NOT {inner}"
        if inner.startswith("-"):
            inner = f"({inner})"  # avoid '--', which scans as a comment
        return f"-{inner}"
    if isinstance(node, ast.Bin):
        op = node.op.upper() if node.op in ("and", "or") else node.op
        return f"({print_expr(node.left)} {op} {print_expr(node.right)})"
    if isinstance(node, ast.Call):
        args = "*" if node.star else ", ".join(print_expr(a) for a in node.args)
        text = f"{node.fname}({args})"
        if node.destructure:
            text += ".{" + ", ".join(node.destructure) + "}"
        return text
    raise TypeError(f"unprintable node {type(node).__name__}")


def _predicate(node) -> str:
    """A WHERE conjunct, without the outer parentheses the grammar
    does not accept there."""
    if isinstance(node, ast.Bin):
        return f"{print_expr(node.left)} {node.op} {print_expr(node.right)}"
    return print_expr(node)


def print_select(sel: ast.Select, indent: str = "") -> str:
    items = []
    for item in sel.items:
        text = print_expr(item.expr)
        if item.alias:
            text += f" AS {item.alias}"
        items.append(text)
    froms = []
    for f in sel.froms:
        if isinstance(f, ast.TableRef):
            froms.append(f.name)
        else:
            froms.append("(" + print_select(f.query, indent) + ")")
    out = f"SELECT {', '.join(items)} FROM {', '.join(froms)}"
    if sel.where:
        out += " WHERE " + " AND ".join(_predicate(w) for w in sel.where)
    if sel.group_by:
        out += " GROUP BY " + ", ".join(print_expr(c) for c in sel.group_by)
    return out


def _gate(gate) -> str:
    if gate is None:
        return "FIXPOINT"
    lit = _lit(gate.literal)
    return f"({gate.fname}({gate.arg}) {gate.cmp} {lit})"


def print_program(prog: ast.Program) -> str:
    block = prog.block
    if isinstance(block, ast.Select):
        return print_select(block)
    cols = ", ".join(block.columns)
    union = "UNION ALL" if block.union_all else "UNION"
    return (
        f"WITH {block.name} ({cols}) AS (\n"
        f"  {print_select(block.base)}\n"
        f") {union} UNTIL {_gate(block.gate)} BY {block.by_key} (\n"
        f"  {print_select(block.recursive)}\n"
        f")"
    )
