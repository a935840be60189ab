"""Tokenizer for the RQL subset.  Keywords are case-insensitive, identifiers
case-sensitive; `--` starts a comment running to end of line."""

from __future__ import annotations

from dataclasses import dataclass

from deltaflow.errors import RqlSyntaxError

KEYWORDS = {"WITH", "AS", "SELECT", "FROM", "WHERE", "GROUP", "BY", "UNION",
            "ALL", "UNTIL", "FIXPOINT", "AND", "OR", "NOT", "TRUE", "FALSE"}

# multi-char symbols first so maximal munch wins
SYMBOLS = ("<=", ">=", "<>", "(", ")", ",", ".", "{", "}", "*", "+", "-",
           "/", "=", "<", ">")


@dataclass
class Token:
    kind: str    # KEYWORD IDENT INT FLOAT STRING SYMBOL EOF
    text: str
    value: object
    line: int
    column: int

    def __repr__(self):
        return f"{self.kind}({self.text!r})@{self.line}:{self.column}"


def tokenize(text: str):
    tokens = []
    i, line, col = 0, 1, 1
    n = len(text)

    def err(msg):
        raise RqlSyntaxError(msg, line, col)

    while i < n:
        c = text[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if text.startswith("--", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or
                             (text[j] == "." and not seen_dot
                              and j + 1 < n and text[j + 1].isdigit())):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            # exponent part (1e-9 and friends)
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
                    seen_dot = True
            lex = text[i:j]
            if seen_dot:
                tokens.append(Token("FLOAT", lex, float(lex), line, start_col))
            else:
                tokens.append(Token("INT", lex, int(lex), line, start_col))
            col += j - i
            i = j
            continue
        if c == "'":
            j = i + 1
            buf = []
            while j < n and text[j] != "'":
                if text[j] == "\n":
                    err("unterminated string literal")
                buf.append(text[j])
                j += 1
            if j >= n:
                err("unterminated string literal")
            tokens.append(Token("STRING", text[i:j + 1], "".join(buf),
                                line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            lex = text[i:j]
            upper = lex.upper()
            if upper in KEYWORDS:
                tokens.append(Token("KEYWORD", upper, upper, line, start_col))
            else:
                tokens.append(Token("IDENT", lex, lex, line, start_col))
            col += j - i
            i = j
            continue
        for sym in SYMBOLS:
            if text.startswith(sym, i):
                tokens.append(Token("SYMBOL", sym, sym, line, start_col))
                i += len(sym)
                col += len(sym)
                break
        else:
            err(f"unexpected character {c!r}")
    tokens.append(Token("EOF", "", None, line, col))
    return tokens
