"""Validation against a schema and deterministic execution over a Table.

Semantics, in brief:

* stages run left to right, each producing a new row list (inputs are never
  mutated);
* FILTER drops rows whose tested value is null; ``==``/``!=`` on strings are
  case-sensitive, ``CONTAINS`` is a case-insensitive substring test;
* DERIVE propagates nulls; ``/`` is true division and a zero divisor aborts
  execution with the row index;
* GROUP BY must be followed directly by AGGREGATE; rows with a null group key
  are dropped and groups appear in order of first occurrence;
* aggregates skip nulls. ``COUNT(*)`` counts rows, ``COUNT(col)`` non-null
  values. An aggregate with no non-null input raises, except the COUNT family
  which yields 0. MEDIAN of an even count is the mean of the two middle values;
* SORT is stable, nulls last in either direction.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Any, Callable

from ehrllm.query.ast import (
    Aggregate,
    BinOp,
    ColumnRef,
    Derive,
    Expr,
    Filter,
    GroupBy,
    Limit,
    Neg,
    Number,
    Program,
    RefDate,
    Select,
    Sort,
    YearsBetween,
    aggregate_output_name,
)
from ehrllm.tabular import Column, Schema, Table, parse_date

NUMERIC = ("integer", "float")


class ValidationError(ValueError):
    def __init__(self, message: str, stage_index: int | None = None):
        self.stage_index = stage_index
        prefix = f"stage {stage_index + 1}: " if stage_index is not None else ""
        super().__init__(prefix + message)


class UnknownColumnError(ValidationError):
    def __init__(self, column: str, stage_index: int, available: list[str]):
        self.column = column
        super().__init__(
            f"unknown column {column!r}; available columns: {', '.join(available)}", stage_index
        )


class TypeMismatchError(ValidationError):
    pass


class ExecutionError(RuntimeError):
    pass


class DivisionByZeroError(ExecutionError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"division by zero at row {row}")


class NegativeAgeError(ExecutionError):
    def __init__(self, dob: dt.date, reference: dt.date, row: int | None = None):
        self.dob = dob
        self.reference = reference
        self.row = row
        where = f" at row {row}" if row is not None else ""
        super().__init__(f"date of birth {dob} is after reference date {reference}{where}")


class EmptyAggregateError(ExecutionError):
    pass


@dataclass(frozen=True)
class ExecutionContext:
    reference_date: dt.date


def years_between(dob: dt.date, reference: dt.date) -> int:
    """Completed years from ``dob`` to ``reference``.

    A 29 February birthday is reached on 1 March in non-leap years.
    """
    if dob > reference:
        raise NegativeAgeError(dob, reference)
    return reference.year - dob.year - ((reference.month, reference.day) < (dob.month, dob.day))


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class ValidatedProgram:
    """A program checked against one input schema.

    ``plans`` holds one resolved step per stage (column indices, coerced
    literals, compiled expressions); ``output_schema`` is None when the result
    is a scalar.
    """

    program: Program
    input_schema: Schema
    plans: tuple[tuple, ...]
    output_schema: Schema | None

    @property
    def is_scalar(self) -> bool:
        return self.output_schema is None


def _check_literal(stage: Filter, kind: str, i: int):
    value, op = stage.value, stage.op
    is_num = isinstance(value, (int, float)) and not isinstance(value, bool)

    def mismatch(what: str):
        return TypeMismatchError(f"{op} on {kind} column {stage.column!r} with {what}", i)

    if op == "CONTAINS" and kind != "string":
        raise mismatch("CONTAINS (only valid on string columns)")
    if kind in NUMERIC:
        if not is_num:
            raise mismatch(f"non-numeric literal {value!r}")
        return value
    if kind == "string":
        if not isinstance(value, str):
            raise mismatch(f"non-string literal {value!r}")
        return value
    if kind == "date":
        parsed = parse_date(value) if isinstance(value, str) else None
        if parsed is None:
            raise mismatch(f"literal {value!r} (expected a \"YYYY-MM-DD\" string)")
        return parsed
    if kind == "boolean":
        if not isinstance(value, bool):
            raise mismatch(f"non-boolean literal {value!r}")
        if op not in ("==", "!="):
            raise mismatch("ordering comparator")
        return value
    raise mismatch("unsupported column kind")


def _compile_expr(expr: Expr, scope: list[Column], i: int) -> tuple[Callable, str]:
    """Return ``(fn(row, ref_date) -> value, kind)`` for a DERIVE expression."""
    names = [c.name for c in scope]

    def lookup(name: str) -> tuple[int, str]:
        if name not in names:
            raise UnknownColumnError(name, i, names)
        j = names.index(name)
        return j, scope[j].kind

    if isinstance(expr, Number):
        v = expr.value
        return (lambda row, ref: v), ("integer" if isinstance(v, int) else "float")
    if isinstance(expr, ColumnRef):
        j, kind = lookup(expr.name)
        if kind not in NUMERIC:
            raise TypeMismatchError(f"arithmetic on {kind} column {expr.name!r}", i)
        return (lambda row, ref: row[j]), kind
    if isinstance(expr, YearsBetween):
        j, kind = lookup(expr.column)
        if kind != "date":
            raise TypeMismatchError(f"YEARS_BETWEEN needs a date column, {expr.column!r} is {kind}", i)
        if isinstance(expr.reference, RefDate):
            fixed = None
        else:
            fixed = parse_date(expr.reference)
            if fixed is None:
                raise TypeMismatchError(f"bad reference date {expr.reference!r}", i)

        def years(row, ref):
            dob = row[j]
            if dob is None:
                return None
            return years_between(dob, fixed or ref)

        return years, "integer"
    if isinstance(expr, Neg):
        fn, kind = _compile_expr(expr.operand, scope, i)

        def neg(row, ref):
            v = fn(row, ref)
            return None if v is None else -v

        return neg, kind
    if isinstance(expr, BinOp):
        lf, lk = _compile_expr(expr.left, scope, i)
        rf, rk = _compile_expr(expr.right, scope, i)
        op = expr.op
        kind = "integer" if lk == rk == "integer" and op != "/" else "float"

        def binop(row, ref):
            a, b = lf(row, ref), rf(row, ref)
            if a is None or b is None:
                return None
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if b == 0:
                raise ZeroDivisionError
            return a / b

        return binop, kind
    raise TypeError(f"not an expression: {expr!r}")


_AGG_KINDS = {
    "COUNT": ("integer", "float", "string", "date", "boolean"),
    "COUNT_DISTINCT": ("integer", "float", "string", "date", "boolean"),
    "SUM": NUMERIC,
    "MEAN": NUMERIC,
    "MEDIAN": NUMERIC,
    "MIN": ("integer", "float", "string", "date"),
    "MAX": ("integer", "float", "string", "date"),
}


def _agg_output_kind(func: str, target_kind: str | None) -> str:
    if func in ("COUNT", "COUNT_DISTINCT"):
        return "integer"
    if func in ("MEAN", "MEDIAN"):
        return "float"
    return target_kind


def validate_program(program: Program, schema: Schema) -> ValidatedProgram:
    """Resolve every column reference and check types and stage order."""
    scope = list(schema.columns)
    plans = []
    stages = program.stages
    if not stages:
        raise ValidationError("program has no stages")
    grouped: tuple[int, ...] | None = None
    aggregated = scalar = False

    def resolve(name: str, i: int) -> int:
        names = [c.name for c in scope]
        if name not in names:
            raise UnknownColumnError(name, i, names)
        return names.index(name)

    for i, stage in enumerate(stages):
        if aggregated and not isinstance(stage, (Sort, Limit)):
            raise ValidationError("only SORT or LIMIT may follow AGGREGATE", i)
        if scalar:
            raise ValidationError("nothing may follow an ungrouped AGGREGATE", i)
        if grouped is not None and not isinstance(stage, Aggregate):
            raise ValidationError("GROUP BY must be followed directly by AGGREGATE", i)

        if isinstance(stage, Filter):
            j = resolve(stage.column, i)
            value = _check_literal(stage, scope[j].kind, i)
            plans.append(("filter", j, stage.op, value))
        elif isinstance(stage, Derive):
            if stage.name in [c.name for c in scope]:
                raise ValidationError(f"DERIVE would overwrite existing column {stage.name!r}", i)
            fn, kind = _compile_expr(stage.expr, scope, i)
            plans.append(("derive", fn))
            scope.append(Column(stage.name, kind))
        elif isinstance(stage, GroupBy):
            if any(isinstance(s, GroupBy) for s in stages[:i]):
                raise ValidationError("at most one GROUP BY is allowed", i)
            if i + 1 >= len(stages):
                raise ValidationError("GROUP BY must be followed directly by AGGREGATE", i)
            if len(set(stage.columns)) != len(stage.columns):
                raise ValidationError("duplicate column in GROUP BY", i)
            grouped = tuple(resolve(c, i) for c in stage.columns)
            plans.append(("group",))
        elif isinstance(stage, Aggregate):
            if stage.target is None:
                if stage.func != "COUNT":
                    raise TypeMismatchError(f"{stage.func}(*) is not allowed; only COUNT(*)", i)
                j, tkind = None, None
            else:
                j = resolve(stage.target, i)
                tkind = scope[j].kind
                if tkind not in _AGG_KINDS[stage.func]:
                    raise TypeMismatchError(f"{stage.func} on {tkind} column {stage.target!r}", i)
            out_col = Column(aggregate_output_name(stage), _agg_output_kind(stage.func, tkind))
            plans.append(("aggregate", stage.func, j, grouped))
            if grouped is None:
                scalar = True
                scope = []
            else:
                group_cols = [scope[g] for g in grouped]
                if out_col.name in [c.name for c in group_cols]:
                    raise ValidationError(f"aggregate output {out_col.name!r} clashes with a group column", i)
                scope = group_cols + [out_col]
                grouped = None
            aggregated = True
        elif isinstance(stage, Select):
            if len(set(stage.columns)) != len(stage.columns):
                raise ValidationError("duplicate column in SELECT", i)
            idx = tuple(resolve(c, i) for c in stage.columns)
            plans.append(("select", idx))
            scope = [scope[j] for j in idx]
        elif isinstance(stage, Sort):
            j = resolve(stage.column, i)
            plans.append(("sort", j, stage.descending))
        elif isinstance(stage, Limit):
            if stage.n < 0:
                raise ValidationError("LIMIT must be non-negative", i)
            plans.append(("limit", stage.n))
        else:
            raise ValidationError(f"unsupported stage {stage!r}", i)

    return ValidatedProgram(program, schema, tuple(plans), None if scalar else Schema(tuple(scope)))


# -- execution --------------------------------------------------------------

def _compare(op: str, a, b) -> bool:
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    return b.casefold() in a.casefold()


def _median(values: list) -> float:
    s = sorted(values)
    n = len(s)
    mid = n // 2
    if n % 2:
        return float(s[mid])
    return (s[mid - 1] + s[mid]) / 2


def aggregate_values(func: str, values: list | None, n_rows: int) -> Any:
    """Apply one aggregate. ``values`` is None for ``COUNT(*)``."""
    if values is None:
        return n_rows
    present = [v for v in values if v is not None]
    if func == "COUNT":
        return len(present)
    if func == "COUNT_DISTINCT":
        return len(set(present))
    if not present:
        raise EmptyAggregateError(f"{func} over zero non-null values")
    if func == "SUM":
        if all(isinstance(v, int) for v in present):
            return sum(present)
        return math.fsum(present)
    if func == "MEAN":
        return math.fsum(present) / len(present)
    if func == "MEDIAN":
        return _median(present)
    if func == "MIN":
        return min(present)
    if func == "MAX":
        return max(present)
    raise ValueError(f"unknown aggregate {func}")


def execute_program(program: ValidatedProgram, table: Table, ctx: ExecutionContext):
    """Run a validated program. Returns a scalar or a :class:`Table`."""
    if table.schema != program.input_schema:
        raise ExecutionError("table schema differs from the schema the program was validated against")
    rows: list[tuple] = list(table.rows)
    ref = ctx.reference_date
    for plan in program.plans:
        op = plan[0]
        if op == "filter":
            _, j, cmp, value = plan
            rows = [r for r in rows if r[j] is not None and _compare(cmp, r[j], value)]
        elif op == "derive":
            fn = plan[1]
            out = []
            for n, r in enumerate(rows):
                try:
                    v = fn(r, ref)
                except ZeroDivisionError:
                    raise DivisionByZeroError(n) from None
                except NegativeAgeError as exc:
                    raise NegativeAgeError(exc.dob, exc.reference, row=n) from None
                out.append(r + (v,))
            rows = out
        elif op == "group":
            continue
        elif op == "aggregate":
            _, func, j, grouped = plan
            if grouped is None:
                return aggregate_values(func, None if j is None else [r[j] for r in rows], len(rows))
            groups: dict[tuple, list[tuple]] = {}
            for r in rows:
                key = tuple(r[g] for g in grouped)
                if any(k is None for k in key):
                    continue
                groups.setdefault(key, []).append(r)
            rows = [
                key + (aggregate_values(func, None if j is None else [r[j] for r in members], len(members)),)
                for key, members in groups.items()
            ]
        elif op == "select":
            idx = plan[1]
            rows = [tuple(r[j] for j in idx) for r in rows]
        elif op == "sort":
            _, j, desc = plan
            present = [r for r in rows if r[j] is not None]
            missing = [r for r in rows if r[j] is None]
            rows = sorted(present, key=lambda r: r[j], reverse=desc) + missing
        elif op == "limit":
            rows = rows[: plan[1]]
    return Table(program.output_schema, tuple(rows))
