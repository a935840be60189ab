"""RQL frontend: query text -> typed AST -> logical plan -> physical plan."""

from deltaflow.rql.parser import parse
from deltaflow.rql.printer import print_program
from deltaflow.rql.typecheck import Catalog, typecheck
from deltaflow.rql.lower import compile_program, explain, to_logical

__all__ = ["parse", "print_program", "Catalog", "typecheck", "to_logical",
           "compile_program", "explain"]
