"""Query program syntax tree and its canonical text form."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

AGG_FUNCS = ("COUNT", "SUM", "MEAN", "MEDIAN", "MIN", "MAX", "COUNT_DISTINCT")
COMPARATORS = ("==", "!=", "<", "<=", ">", ">=", "CONTAINS")
ARITH_OPS = ("+", "-", "*", "/")

_BARE_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


# -- expressions ------------------------------------------------------------

@dataclass(frozen=True)
class ColumnRef:
    name: str


@dataclass(frozen=True)
class Number:
    value: int | float


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class RefDate:
    """``@ref``: the execution context's reference date."""


@dataclass(frozen=True)
class YearsBetween:
    column: str
    reference: RefDate | str  # "@ref" or an ISO date string


Expr = Union[ColumnRef, Number, Neg, BinOp, YearsBetween]


# -- stages -----------------------------------------------------------------

@dataclass(frozen=True)
class Filter:
    column: str
    op: str
    value: int | float | str | bool


@dataclass(frozen=True)
class Derive:
    name: str
    expr: Expr


@dataclass(frozen=True)
class GroupBy:
    columns: tuple[str, ...]


@dataclass(frozen=True)
class Aggregate:
    func: str
    target: str | None  # None means ``*``


@dataclass(frozen=True)
class Select:
    columns: tuple[str, ...]


@dataclass(frozen=True)
class Sort:
    column: str
    descending: bool = False


@dataclass(frozen=True)
class Limit:
    n: int


Stage = Union[Filter, Derive, GroupBy, Aggregate, Select, Sort, Limit]


@dataclass(frozen=True)
class Program:
    stages: tuple[Stage, ...]

    def __str__(self) -> str:
        return to_text(self)


def operation_count(program: Program) -> int:
    return len(program.stages)


def aggregate_output_name(agg: Aggregate) -> str:
    if agg.target is None:
        return "COUNT"
    return f"{agg.func}_{agg.target}"


# -- printing ---------------------------------------------------------------

def ident(name: str) -> str:
    if _BARE_IDENT.fullmatch(name) and name.upper() != "YEARS_BETWEEN":
        return name
    return "`" + name.replace("`", "``") + "`"


def quote(text: str) -> str:
    out = text.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")
    return f'"{out}"'


def _number(value: int | float) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _literal(value) -> str:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, (int, float)):
        return _number(value)
    return quote(value)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _expr(e: Expr) -> str:
    if isinstance(e, ColumnRef):
        return ident(e.name)
    if isinstance(e, Number):
        return _number(e.value)
    if isinstance(e, Neg):
        return f"-({_expr(e.operand)})"
    if isinstance(e, YearsBetween):
        ref = "@ref" if isinstance(e.reference, RefDate) else quote(e.reference)
        return f"YEARS_BETWEEN({ident(e.column)}, {ref})"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left, right = _expr(e.left), _expr(e.right)
        if isinstance(e.left, BinOp) and _PREC[e.left.op] < p:
            left = f"({left})"
        if isinstance(e.right, BinOp) and _PREC[e.right.op] <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise TypeError(f"not an expression: {e!r}")


def stage_text(stage: Stage) -> str:
    if isinstance(stage, Filter):
        return f"FILTER {ident(stage.column)} {stage.op} {_literal(stage.value)}"
    if isinstance(stage, Derive):
        return f"DERIVE {ident(stage.name)} = {_expr(stage.expr)}"
    if isinstance(stage, GroupBy):
        return "GROUP BY " + ", ".join(ident(c) for c in stage.columns)
    if isinstance(stage, Aggregate):
        target = "*" if stage.target is None else ident(stage.target)
        return f"AGGREGATE {stage.func}({target})"
    if isinstance(stage, Select):
        return "SELECT " + ", ".join(ident(c) for c in stage.columns)
    if isinstance(stage, Sort):
        return f"SORT {ident(stage.column)} {'DESC' if stage.descending else 'ASC'}"
    if isinstance(stage, Limit):
        return f"LIMIT {stage.n}"
    raise TypeError(f"not a stage: {stage!r}")


def to_text(program: Program) -> str:
    """Canonical form: upper-case keywords, single spaces, `` | `` between stages."""
    return " | ".join(stage_text(s) for s in program.stages)
