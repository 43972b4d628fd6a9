"""Independent reference implementations used as test oracles.

None of these import the code under test beyond plain data types; they are
written for obviousness, not speed.
"""

from __future__ import annotations

import datetime as dt
import itertools
import random
from fractions import Fraction

from ehrllm.query.ast import (
    Aggregate,
    BinOp,
    ColumnRef,
    Derive,
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
)
from ehrllm.tabular import Column, Schema, Table


class OracleError(Exception):
    """Raised by the naive interpreter; ``kind`` names the engine error it corresponds to."""

    def __init__(self, kind: str, row: int | None = None):
        self.kind = kind
        self.row = row
        super().__init__(kind, row)


# -- calendar -----------------------------------------------------------------

def age_by_stepping(dob: dt.date, ref: dt.date) -> int:
    """Count whole birthdays by walking forward a year at a time (29 Feb -> 1 Mar)."""
    if dob > ref:
        raise OracleError("negative_age")
    years = 0
    while True:
        y = dob.year + years + 1
        try:
            birthday = dob.replace(year=y)
        except ValueError:
            birthday = dt.date(y, 3, 1)
        if birthday > ref:
            return years
        years += 1


# -- naive interpreter --------------------------------------------------------

def _eval(expr, row: dict, ref: dt.date):
    if isinstance(expr, Number):
        return expr.value
    if isinstance(expr, ColumnRef):
        return row[expr.name]
    if isinstance(expr, Neg):
        v = _eval(expr.operand, row, ref)
        return None if v is None else -v
    if isinstance(expr, YearsBetween):
        dob = row[expr.column]
        if dob is None:
            return None
        target = ref if isinstance(expr.reference, RefDate) else dt.date.fromisoformat(expr.reference)
        return age_by_stepping(dob, target)
    if isinstance(expr, BinOp):
        a, b = _eval(expr.left, row, ref), _eval(expr.right, row, ref)
        if a is None or b is None:
            return None
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if b == 0:
            raise ZeroDivisionError
        return a / b
    raise TypeError(expr)


def _matches(op, a, b) -> bool:
    if a is None:
        return False
    if isinstance(b, str) and isinstance(a, dt.date):
        b = dt.date.fromisoformat(b)
    return {
        "==": lambda: a == b,
        "!=": lambda: a != b,
        "<": lambda: a < b,
        "<=": lambda: a <= b,
        ">": lambda: a > b,
        ">=": lambda: a >= b,
        "CONTAINS": lambda: b.lower() in a.lower(),
    }[op]()


def _aggregate(func, values, n_rows):
    if values is None:
        return n_rows
    vals = [v for v in values if v is not None]
    if func == "COUNT":
        return len(vals)
    if func == "COUNT_DISTINCT":
        seen = []
        for v in vals:
            if v not in seen:
                seen.append(v)
        return len(seen)
    if not vals:
        raise OracleError("empty")
    if func in ("MIN", "MAX"):
        best = vals[0]
        for v in vals[1:]:
            if (v < best) if func == "MIN" else (v > best):
                best = v
        return best
    exact = [Fraction(v) for v in vals]
    if func == "SUM":
        total = sum(exact, Fraction(0))
        return int(total) if all(isinstance(v, int) for v in vals) else float(total)
    if func == "MEAN":
        return float(sum(exact, Fraction(0)) / len(exact))
    if func == "MEDIAN":
        s = sorted(exact)
        n = len(s)
        mid = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
        return float(mid)
    raise ValueError(func)


def _stable_sort(rows, col, desc):
    present = [r for r in rows if r[col] is not None]
    missing = [r for r in rows if r[col] is None]
    out = []
    for r in present:  # insertion sort: equal keys keep input order
        pos = len(out)
        while pos > 0 and ((out[pos - 1][col] < r[col]) if desc else (out[pos - 1][col] > r[col])):
            pos -= 1
        out.insert(pos, r)
    return out + missing


def naive_execute(program: Program, table: Table, ref: dt.date):
    """Row-dict interpreter over the AST. Returns a scalar or ``(column names, rows)``."""
    names = list(table.schema.names)
    rows = [dict(zip(names, r)) for r in table.rows]
    group_cols = None
    for stage in program.stages:
        if isinstance(stage, Filter):
            rows = [r for r in rows if _matches(stage.op, r[stage.column], stage.value)]
        elif isinstance(stage, Derive):
            new = []
            for i, r in enumerate(rows):
                try:
                    v = _eval(stage.expr, r, ref)
                except ZeroDivisionError:
                    raise OracleError("div0", i) from None
                except OracleError as exc:
                    raise OracleError(exc.kind, i) from None
                new.append({**r, stage.name: v})
            rows = new
            names.append(stage.name)
        elif isinstance(stage, GroupBy):
            group_cols = list(stage.columns)
        elif isinstance(stage, Aggregate):
            out_name = "COUNT" if stage.target is None else f"{stage.func}_{stage.target}"

            def values(rs):
                return None if stage.target is None else [r[stage.target] for r in rs]

            if group_cols is None:
                return _aggregate(stage.func, values(rows), len(rows))
            keys = []
            for r in rows:
                k = tuple(r[c] for c in group_cols)
                if None not in k and k not in keys:
                    keys.append(k)
            new = []
            for k in keys:
                members = [r for r in rows if tuple(r[c] for c in group_cols) == k]
                new.append({**dict(zip(group_cols, k)), out_name: _aggregate(stage.func, values(members), len(members))})
            rows = new
            names = group_cols + [out_name]
            group_cols = None
        elif isinstance(stage, Select):
            names = list(stage.columns)
            rows = [{c: r[c] for c in names} for r in rows]
        elif isinstance(stage, Sort):
            rows = _stable_sort(rows, stage.column, stage.descending)
        elif isinstance(stage, Limit):
            rows = rows[: stage.n]
    return names, [tuple(r[c] for c in names) for r in rows]


# -- random tables and programs ----------------------------------------------

WORDS = ["alpha", "Beta", "gamma", "delta", "EPS", "zeta", "eta", "theta", "x y", 'q"t', "b\\s", "naïve"]


def random_value(rng: random.Random, kind: str):
    if rng.random() < 0.12:
        return None
    if kind == "integer":
        return rng.randint(-20, 20)
    if kind == "float":
        return rng.choice([rng.uniform(-100, 100), float(rng.randint(-5, 5)), rng.choice([0.5, 1.25, -2.5])])
    if kind == "string":
        return rng.choice(WORDS)
    if kind == "date":
        return dt.date(1930, 1, 1) + dt.timedelta(days=rng.randint(0, 365 * 70))
    return rng.random() < 0.5


def random_table(rng: random.Random, max_rows: int = 100) -> Table:
    kinds = ["integer", "float", "string", "date", "boolean"]
    cols = [Column("c0", "string"), Column("c1", "integer")]
    for i in range(2, rng.randint(3, 7)):
        cols.append(Column(f"c{i}", rng.choice(kinds)))
    schema = Schema(tuple(cols))
    n = rng.randint(0, max_rows)
    rows = tuple(tuple(random_value(rng, c.kind) for c in cols) for _ in range(n))
    return Table(schema, rows)


def _pick(rng, scope, kinds):
    options = [c for c in scope if c.kind in kinds]
    return rng.choice(options) if options else None


def _random_expr(rng, scope, depth=0):
    numeric = [c for c in scope if c.kind in ("integer", "float")]
    dates = [c for c in scope if c.kind == "date"]
    r = rng.random()
    if dates and r < 0.2:
        ref = RefDate() if rng.random() < 0.7 else "2030-06-15"
        return YearsBetween(rng.choice(dates).name, ref)
    if depth >= 2 or r < 0.45:
        if numeric and rng.random() < 0.7:
            return ColumnRef(rng.choice(numeric).name)
        return Number(rng.choice([rng.randint(0, 9), rng.choice([0.5, 2.0, 1e-3, 3.25])]))
    if r < 0.55:
        return Neg(_random_expr(rng, scope, depth + 1))
    return BinOp(rng.choice("+-*/"), _random_expr(rng, scope, depth + 1), _random_expr(rng, scope, depth + 1))


def _literal_for(rng, column, table_rows, idx):
    seen = [r[idx] for r in table_rows if r[idx] is not None]
    kind = column.kind
    if seen and rng.random() < 0.6:
        v = rng.choice(seen)
    else:
        v = random_value(rng, kind)
        if v is None:
            v = {"integer": 3, "float": 1.5, "string": "eta", "date": dt.date(1970, 1, 1), "boolean": True}[kind]
    if kind == "date":
        return v.isoformat()
    return v


def random_program(rng: random.Random, table: Table) -> Program:
    """A random program that is valid for ``table`` by construction (modulo run-time errors)."""
    scope = list(table.schema.columns)
    stages = []
    counter = itertools.count()
    for _ in range(rng.randint(0, 4)):
        if rng.random() < 0.5:
            col = rng.choice(scope)
            if col.kind == "boolean":
                op = rng.choice(["==", "!="])
            elif col.kind == "string":
                op = rng.choice(["==", "!=", "<", ">=", "CONTAINS"])
            else:
                op = rng.choice(["==", "!=", "<", "<=", ">", ">="])
            if col.name in table.schema:
                idx = table.schema.index(col.name)
                lit = _literal_for(rng, col, table.rows, idx)
            else:
                lit = random_value(rng, col.kind)
                if lit is None:
                    lit = 1
                if col.kind == "date":
                    lit = lit.isoformat()
            if op == "CONTAINS":
                lit = rng.choice(["a", "E", "x", "ï", "zz"])
            stages.append(Filter(col.name, op, lit))
        else:
            expr = _random_expr(rng, scope)
            name = f"d{next(counter)}"
            stages.append(Derive(name, expr))
            kind = _derived_kind(expr, scope)
            scope.append(Column(name, kind))
    tail = rng.random()
    if tail < 0.35:
        func = rng.choice(["COUNT", "SUM", "MEAN", "MEDIAN", "MIN", "MAX", "COUNT_DISTINCT"])
        target = _agg_target(rng, func, scope)
        keys = rng.sample([c for c in scope if c.name != target], k=min(len(scope) - 1, rng.randint(1, 2)))
        stages.append(GroupBy(tuple(c.name for c in keys)))
        stages.append(Aggregate(func, target))
        out = "COUNT" if target is None else f"{func}_{target}"
        post_scope = [c.name for c in keys] + [out]
        if rng.random() < 0.6:
            stages.append(Sort(rng.choice(post_scope), rng.random() < 0.5))
        if rng.random() < 0.4:
            stages.append(Limit(rng.randint(0, 5)))
    elif tail < 0.65:
        func = rng.choice(["COUNT", "SUM", "MEAN", "MEDIAN", "MIN", "MAX", "COUNT_DISTINCT"])
        stages.append(Aggregate(func, _agg_target(rng, func, scope)))
    else:
        if rng.random() < 0.6:
            stages.append(Select(tuple(c.name for c in rng.sample(scope, k=rng.randint(1, len(scope))))))
            scope = [c for c in scope if c.name in stages[-1].columns]
            scope.sort(key=lambda c: stages[-1].columns.index(c.name))
        if rng.random() < 0.7:
            stages.append(Sort(rng.choice(scope).name, rng.random() < 0.5))
        if rng.random() < 0.5:
            stages.append(Limit(rng.randint(0, 30)))
    if not stages:
        stages.append(Limit(rng.randint(0, 10)))
    return Program(tuple(stages))


def _derived_kind(expr, scope) -> str:
    kinds = {c.name: c.kind for c in scope}
    if isinstance(expr, Number):
        return "integer" if isinstance(expr.value, int) else "float"
    if isinstance(expr, ColumnRef):
        return kinds[expr.name]
    if isinstance(expr, YearsBetween):
        return "integer"
    if isinstance(expr, Neg):
        return _derived_kind(expr.operand, scope)
    lk, rk = _derived_kind(expr.left, scope), _derived_kind(expr.right, scope)
    return "integer" if lk == rk == "integer" and expr.op != "/" else "float"


def _agg_target(rng, func, scope):
    allowed = {
        "COUNT": ("integer", "float", "string", "date", "boolean"),
        "COUNT_DISTINCT": ("integer", "float", "string", "date", "boolean"),
        "SUM": ("integer", "float"), "MEAN": ("integer", "float"), "MEDIAN": ("integer", "float"),
        "MIN": ("integer", "float", "string", "date"), "MAX": ("integer", "float", "string", "date"),
    }[func]
    if func == "COUNT" and rng.random() < 0.4:
        return None
    col = _pick(rng, scope, allowed)
    return col.name if col else None


# -- join ---------------------------------------------------------------------

def nested_loop_left_join(left_names, left_rows, right_names, right_rows, on, suffix):
    """Returns ``(names, rows)``; the right key column is dropped, colliding names get ``suffix``."""
    li, ri = left_names.index(on), right_names.index(on)
    keep = [j for j in range(len(right_names)) if j != ri]
    names = list(left_names) + [right_names[j] + (suffix if right_names[j] in left_names else "") for j in keep]
    out = []
    for lrow in left_rows:
        matched = False
        for rrow in right_rows:
            if lrow[li] is not None and lrow[li] == rrow[ri]:
                out.append(tuple(lrow) + tuple(rrow[j] for j in keep))
                matched = True
        if not matched:
            out.append(tuple(lrow) + (None,) * len(keep))
    return names, out


# -- search -------------------------------------------------------------------

def linear_scan(ids, vectors, query, k):
    scored = []
    for cid, vec in zip(ids, vectors):
        scored.append((-sum(float(a) * float(b) for a, b in zip(vec, query)), int(cid)))
    scored.sort()
    return [(cid, -s) for s, cid in scored[:k]]


# -- ROUGE --------------------------------------------------------------------

def brute_ngram_overlap(cand: list[str], ref: list[str], n: int) -> tuple[int, int, int]:
    """Clipped n-gram overlap by explicit per-gram counting."""
    cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    overlap = 0
    for g in set(cg):
        overlap += min(cg.count(g), rg.count(g))
    return overlap, len(cg), len(rg)


def brute_lcs(a: list[str], b: list[str]) -> int:
    """Longest common subsequence by enumerating subsequences of the shorter side."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(any(x == y for y in it) for x in sub)

    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subseq([short[i] for i in idx], long_):
                return size
    return 0


def prf(overlap, n_cand, n_ref):
    if n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return p, r, (0.0 if p + r == 0 else 2 * p * r / (p + r))


# -- files --------------------------------------------------------------------

def wc_lines(path) -> int:
    with open(path, "rb") as fh:
        return fh.read().count(b"\n")
