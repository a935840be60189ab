"""Recursive-descent parser for the RQL subset:

    program   := with_block | select
    with_block:= WITH name "(" cols ")" AS "(" select ")"
                 UNION [ALL] UNTIL termination BY name "(" select ")"
    termination := FIXPOINT | "(" agg "(" (col | changed | *) ")" cmp lit ")"
    select    := SELECT items FROM froms [WHERE conjunction]
                 [GROUP BY cols]

Select items are arithmetic expressions, aggregate calls, or UDA calls with
`.{a, b}` destructuring; FROM accepts base relations and parenthesized
subqueries.  WHERE is a conjunction of comparisons.
"""

from __future__ import annotations

from deltaflow.errors import RqlSyntaxError
from deltaflow.rql import ast
from deltaflow.rql.lexer import tokenize

_CMPS = ("<", "<=", ">", ">=", "=", "<>")


class _Parser:
    def __init__(self, text):
        self.tokens = tokenize(text)
        self.pos = 0

    # -- token plumbing ----------------------------------------------------
    def peek(self, ahead=0):
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self):
        t = self.tokens[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def err(self, msg, tok=None):
        tok = tok or self.peek()
        raise RqlSyntaxError(f"{msg} (found {tok.text!r})",
                             tok.line, tok.column)

    def accept(self, kind, text=None):
        t = self.peek()
        if t.kind == kind and (text is None or t.text == text):
            return self.next()
        return None

    def expect(self, kind, text=None, what=None):
        t = self.accept(kind, text)
        if t is None:
            self.err(f"expected {what or text or kind}")
        return t

    def ident(self, what="identifier"):
        t = self.peek()
        if t.kind != "IDENT":
            self.err(f"expected {what}")
        return self.next().value

    # -- grammar -------------------------------------------------------------
    def program(self):
        if self.peek().kind == "KEYWORD" and self.peek().text == "WITH":
            block = self.with_block()
        else:
            block = self.select()
        self.expect("EOF", what="end of query")
        return ast.Program(block)

    def with_block(self):
        self.expect("KEYWORD", "WITH")
        name = self.ident("relation name")
        self.expect("SYMBOL", "(")
        columns = [self.ident("column name")]
        while self.accept("SYMBOL", ","):
            columns.append(self.ident("column name"))
        self.expect("SYMBOL", ")")
        self.expect("KEYWORD", "AS")
        self.expect("SYMBOL", "(")
        base = self.select()
        self.expect("SYMBOL", ")")
        self.expect("KEYWORD", "UNION")
        union_all = self.accept("KEYWORD", "ALL") is not None
        self.expect("KEYWORD", "UNTIL")
        gate = self.termination()
        self.expect("KEYWORD", "BY")
        by_key = self.ident("key column")
        self.expect("SYMBOL", "(")
        recursive = self.select()
        self.expect("SYMBOL", ")")
        return ast.WithBlock(name, columns, base, union_all, gate, by_key,
                             recursive)

    def termination(self):
        if self.accept("KEYWORD", "FIXPOINT"):
            return None
        self.expect("SYMBOL", "(", what="FIXPOINT or ( condition )")
        fname = self.ident("aggregate name")
        self.expect("SYMBOL", "(")
        if self.accept("SYMBOL", "*"):
            arg = "*"
        else:
            arg = self.ident("column, 'changed', or *")
        self.expect("SYMBOL", ")")
        tok = self.peek()
        if tok.kind != "SYMBOL" or tok.text not in _CMPS:
            self.err("expected comparison operator")
        cmp_op = self.next().text
        lit = self.literal()
        self.expect("SYMBOL", ")")
        return ast.Gate(fname, arg, cmp_op, lit)

    def literal(self):
        neg = self.accept("SYMBOL", "-") is not None
        t = self.peek()
        if t.kind in ("INT", "FLOAT"):
            self.next()
            return -t.value if neg else t.value
        if neg:
            self.err("expected number")
        if t.kind == "STRING":
            self.next()
            return t.value
        if t.kind == "KEYWORD" and t.text in ("TRUE", "FALSE"):
            self.next()
            return t.text == "TRUE"
        self.err("expected literal")

    def select(self):
        self.expect("KEYWORD", "SELECT")
        items = [self.select_item()]
        while self.accept("SYMBOL", ","):
            items.append(self.select_item())
        self.expect("KEYWORD", "FROM")
        froms = [self.from_item()]
        while self.accept("SYMBOL", ","):
            froms.append(self.from_item())
        where = []
        if self.accept("KEYWORD", "WHERE"):
            where.append(self.comparison())
            while self.accept("KEYWORD", "AND"):
                where.append(self.comparison())
        group_by = []
        if self.accept("KEYWORD", "GROUP"):
            self.expect("KEYWORD", "BY")
            group_by.append(self.column_ref())
            while self.accept("SYMBOL", ","):
                group_by.append(self.column_ref())
        return ast.Select(items, froms, where, group_by)

    def select_item(self):
        expr = self.expr()
        alias = None
        if self.accept("KEYWORD", "AS"):
            alias = self.ident("alias")
        return ast.SelectItem(expr, alias)

    def from_item(self):
        if self.accept("SYMBOL", "("):
            q = self.select()
            self.expect("SYMBOL", ")")
            return ast.SubqueryRef(q)
        return ast.TableRef(self.ident("relation name"))

    def column_ref(self):
        name = self.ident("column name")
        if self.peek().kind == "SYMBOL" and self.peek().text == "." \
                and self.peek(1).kind == "IDENT":
            self.next()
            return ast.Col(self.ident(), qualifier=name)
        return ast.Col(name)

    def comparison(self):
        left = self.expr()
        tok = self.peek()
        if tok.kind != "SYMBOL" or tok.text not in _CMPS:
            self.err("expected comparison operator")
        op = self.next().text
        right = self.expr()
        return ast.Bin(op, left, right)

    # expressions: + - over * / over unary over primary
    def expr(self):
        node = self.term()
        while True:
            tok = self.peek()
            if tok.kind == "SYMBOL" and tok.text in ("+", "-"):
                self.next()
                node = ast.Bin(tok.text, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            tok = self.peek()
            if tok.kind == "SYMBOL" and tok.text in ("*", "/"):
                self.next()
                node = ast.Bin(tok.text, node, self.unary())
            else:
                return node

    def unary(self):
        if self.accept("SYMBOL", "-"):
            return ast.Un("-", self.unary())
        if self.accept("KEYWORD", "NOT"):
            return ast.Un("not", self.unary())
        return self.primary()

    def primary(self):
        t = self.peek()
        if t.kind in ("INT", "FLOAT", "STRING"):
            self.next()
            return ast.Lit(t.value)
        if t.kind == "KEYWORD" and t.text in ("TRUE", "FALSE"):
            self.next()
            return ast.Lit(t.text == "TRUE")
        if t.kind == "SYMBOL" and t.text == "(":
            self.next()
            node = self.expr()
            self.expect("SYMBOL", ")")
            return node
        if t.kind == "IDENT":
            name = self.next().value
            if self.peek().kind == "SYMBOL" and self.peek().text == "(":
                return self.call(name)
            if self.peek().kind == "SYMBOL" and self.peek().text == "." \
                    and self.peek(1).kind == "IDENT":
                self.next()
                return ast.Col(self.ident(), qualifier=name)
            return ast.Col(name)
        self.err("expected expression")

    def call(self, fname):
        self.expect("SYMBOL", "(")
        args, star = [], False
        if self.accept("SYMBOL", "*"):
            star = True
        elif not (self.peek().kind == "SYMBOL" and self.peek().text == ")"):
            args.append(self.expr())
            while self.accept("SYMBOL", ","):
                args.append(self.expr())
        self.expect("SYMBOL", ")")
        destructure = None
        if self.peek().kind == "SYMBOL" and self.peek().text == "." \
                and self.peek(1).kind == "SYMBOL" and self.peek(1).text == "{":
            self.next()
            self.next()
            names = [self.ident("output column")]
            while self.accept("SYMBOL", ","):
                names.append(self.ident("output column"))
            self.expect("SYMBOL", "}")
            destructure = tuple(names)
        return ast.Call(fname, args, destructure, star)


def parse(text: str) -> ast.Program:
    """Parse query text; raises RqlSyntaxError with line/column on failure."""
    return _Parser(text).program()
