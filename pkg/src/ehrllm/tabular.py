"""Typed tables: CSV ingestion, cohort sampling, synthetic DOBs and the join chain.

Tables are immutable. Every operation returns a new :class:`Table` and none of
them touch the input rows, so a loaded table can be shared freely between
threads.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ehrllm.rng import SplitMix64, derive_seed

logger = logging.getLogger(__name__)

KINDS = ("integer", "float", "string", "date", "boolean")

SUBJECT_ID = "SUBJECT_ID"
ICD9_CODE = "ICD9_CODE"

_INT_RE = re.compile(r"[+-]?(?:0|[1-9]\d*)")
_FLOAT_RE = re.compile(r"[+-]?(?:(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)")
_DATE_RE = re.compile(r"(\d{4})-(\d{2})-(\d{2})(?:[ T]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?)?")


class TableError(ValueError):
    """Malformed input data or an operation that does not fit the table."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if not self.name:
            raise TableError("column names must be non-empty")
        if self.kind not in KINDS:
            raise TableError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        seen = set()
        for col in self.columns:
            if col.name in seen:
                raise TableError(f"duplicate column name {col.name!r}")
            seen.add(col.name)

    @classmethod
    def of(cls, *pairs: tuple[str, str]) -> "Schema":
        return cls(tuple(Column(n, k) for n, k in pairs))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self) -> int:
        return len(self.columns)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def kind(self, name: str) -> str:
        return self.columns[self.index(name)].kind


@dataclass(frozen=True)
class Table:
    schema: Schema
    rows: tuple[tuple[Any, ...], ...] = field(default=())

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.rows)
        width = len(self.schema)
        for i, row in enumerate(rows):
            if len(row) != width:
                raise TableError(f"row {i} has {len(row)} values, schema has {width} columns")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_columns(cls, schema: Schema, columns: Mapping[str, Sequence[Any]]) -> "Table":
        data = [columns[name] for name in schema.names]
        return cls(schema, tuple(zip(*data)) if data else ())

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[Any]:
        i = self.schema.index(name)
        return [r[i] for r in self.rows]


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 101
    seed: int = 0
    dob_range: tuple[dt.date, dt.date] = (dt.date(1930, 1, 1), dt.date(2000, 12, 31))
    dob_column_name: str = "DOB_Demo"

    def __post_init__(self):
        if self.n_patients < 1:
            raise TableError("n_patients must be at least 1")
        start, end = self.dob_range
        if start > end:
            raise TableError(f"inverted DOB range: {start} > {end}")


# -- cell parsing -----------------------------------------------------------

def parse_date(text: str) -> dt.date | None:
    m = _DATE_RE.fullmatch(text)
    if not m:
        return None
    try:
        return dt.date(int(m.group(1)), int(m.group(2)), int(m.group(3)))
    except ValueError:
        return None


def parse_cell(text: str, kind: str) -> Any:
    """Parse one CSV cell. Returns None for empty cells; raises ValueError if unparseable."""
    if text == "":
        return None
    if kind == "string":
        return text
    if kind == "integer":
        if _INT_RE.fullmatch(text):
            return int(text)
    elif kind == "float":
        if _FLOAT_RE.fullmatch(text):
            return float(text)
    elif kind == "boolean":
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
    elif kind == "date":
        value = parse_date(text)
        if value is not None:
            return value
    raise ValueError(f"cannot parse {text!r} as {kind}")


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dt.date):
        return value.isoformat()
    return str(value)


def infer_kind(cells: Iterable[str]) -> str:
    """Narrowest kind every non-empty cell parses as; ``string`` otherwise."""
    cells = [c for c in cells if c != ""]
    if not cells:
        return "string"
    for kind in ("integer", "float", "boolean", "date"):
        try:
            for c in cells:
                parse_cell(c, kind)
        except ValueError:
            continue
        return kind
    return "string"


# -- CSV and schema files ---------------------------------------------------

def load_csv(
    path: str | Path,
    schema_hint: Schema | None = None,
    kinds: Mapping[str, str] | None = None,
) -> Table:
    """Read an RFC-4180 CSV file into a typed Table.

    ``schema_hint`` must match the header exactly; its kinds are enforced and
    cells that fail to parse become null (the count is logged). ``kinds`` pins
    individual columns and is the lighter option for identifier-like columns
    (ICD-9 codes, NDCs) that would otherwise be read as numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableError(f"{path}: missing header row") from None
        raw: list[list[str]] = []
        for record in reader:
            if len(record) != len(header):
                raise TableError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(record)}"
                )
            raw.append(record)

    if schema_hint is not None:
        if schema_hint.names != header:
            raise TableError(f"{path}: header {header} does not match schema hint {schema_hint.names}")
        schema = schema_hint
    else:
        kinds = dict(kinds or {})
        schema = Schema(tuple(
            Column(name, kinds.get(name) or infer_kind(r[i] for r in raw))
            for i, name in enumerate(header)
        ))

    bad = 0
    rows = []
    col_kinds = [c.kind for c in schema.columns]
    for record in raw:
        row = []
        for cell, kind in zip(record, col_kinds):
            try:
                row.append(parse_cell(cell, kind))
            except ValueError:
                bad += 1
                row.append(None)
        rows.append(tuple(row))
    if bad:
        logger.warning("%s: %d unparseable cells set to null", path, bad)
    return Table(schema, tuple(rows))


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.schema.names)
    for row in table.rows:
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def write_csv(table: Table, path: str | Path) -> None:
    Path(path).write_text(table_to_csv(table), encoding="utf-8")


def schema_to_text(schema: Schema) -> str:
    return "".join(f"{c.name},{c.kind}\n" for c in schema.columns)


def write_schema(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(schema_to_text(schema), encoding="utf-8")


def read_schema(path: str | Path) -> Schema:
    cols = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        name, sep, kind = line.rpartition(",")
        if not sep:
            raise TableError(f"{path}:{lineno}: expected 'name,kind'")
        cols.append(Column(name, kind.strip()))
    return Schema(tuple(cols))


# -- cohort operations ------------------------------------------------------

def sample_cohort(patients: Table, cfg: CohortConfig) -> Table:
    """Seeded uniform sample of ``cfg.n_patients`` patients without replacement.

    Selected rows keep their original relative order.
    """
    if SUBJECT_ID not in patients.schema:
        raise TableError(f"patients table has no {SUBJECT_ID} column")
    ids = patients.column(SUBJECT_ID)
    if len(set(ids)) != len(ids):
        raise TableError(f"duplicate {SUBJECT_ID} values in patients table")
    if cfg.n_patients >= len(patients):
        return patients
    keep = SplitMix64(cfg.seed).sample_indices(len(patients), cfg.n_patients)
    return Table(patients.schema, tuple(patients.rows[i] for i in keep))


def synthesize_dob(table: Table, cfg: CohortConfig) -> Table:
    """Append a synthetic date-of-birth column drawn uniformly from ``cfg.dob_range``."""
    if not table.rows:
        raise TableError("cannot synthesize dates of birth for an empty table")
    name = cfg.dob_column_name
    if name in table.schema:
        raise TableError(f"column {name!r} already exists")
    start, end = cfg.dob_range
    if start > end:
        raise TableError(f"inverted DOB range: {start} > {end}")
    span = (end - start).days
    rng = SplitMix64(derive_seed(cfg.seed, "dob"))
    rows = tuple(row + (start + dt.timedelta(days=rng.integer(0, span)),) for row in table.rows)
    return Table(Schema(table.schema.columns + (Column(name, "date"),)), rows)


def left_join(left: Table, right: Table, on: str, suffix: str) -> Table:
    """Left join on one key column.

    Every left row is kept; one output row per matching right row (in right
    order), or a single null-padded row when nothing matches. Right columns
    whose name already exists on the left get ``suffix`` appended.
    """
    for side, t in (("left", left), ("right", right)):
        if on not in t.schema:
            raise TableError(f"{side} table has no join key {on!r}")
    lk, rk = left.schema.index(on), right.schema.index(on)
    if left.schema.columns[lk].kind != right.schema.columns[rk].kind:
        raise TableError(
            f"join key {on!r} kind mismatch: "
            f"{left.schema.columns[lk].kind} vs {right.schema.columns[rk].kind}"
        )
    taken = set(left.schema.names)
    new_cols, keep_idx = [], []
    for i, col in enumerate(right.schema.columns):
        if i == rk:
            continue
        name = col.name if col.name not in taken else col.name + suffix
        if name in taken:
            raise TableError(f"column {name!r} collides even after suffixing")
        taken.add(name)
        new_cols.append(Column(name, col.kind))
        keep_idx.append(i)

    buckets: dict[Any, list[tuple]] = {}
    for row in right.rows:
        key = row[rk]
        if key is not None:
            buckets.setdefault(key, []).append(tuple(row[i] for i in keep_idx))
    pad = (None,) * len(keep_idx)
    out = []
    for row in left.rows:
        matches = buckets.get(row[lk]) if row[lk] is not None else None
        if matches:
            out.extend(row + m for m in matches)
        else:
            out.append(row + pad)
    return Table(Schema(left.schema.columns + tuple(new_cols)), tuple(out))


def join_cohort(patients: Table, prescriptions: Table, diagnoses: Table, d_icd: Table) -> Table:
    """patients -> prescriptions -> diagnoses (SUBJECT_ID) -> d_icd (ICD9_CODE), all left joins."""
    for label, t, keys in (
        ("patients", patients, (SUBJECT_ID,)),
        ("prescriptions", prescriptions, (SUBJECT_ID,)),
        ("diagnoses", diagnoses, (SUBJECT_ID, ICD9_CODE)),
        ("d_icd", d_icd, (ICD9_CODE,)),
    ):
        for key in keys:
            if key not in t.schema:
                raise TableError(f"{label} table has no join key {key!r}")
    merged = left_join(patients, prescriptions, SUBJECT_ID, "_RX")
    merged = left_join(merged, diagnoses, SUBJECT_ID, "_DX")
    return left_join(merged, d_icd, ICD9_CODE, "_DICD")


def project_columns(table: Table, keep: Sequence[str]) -> Table:
    missing = [name for name in keep if name not in table.schema]
    if missing:
        raise TableError(f"unknown column(s): {', '.join(missing)}")
    idx = [table.schema.index(name) for name in keep]
    schema = Schema(tuple(table.schema.columns[i] for i in idx))
    return Table(schema, tuple(tuple(r[i] for i in idx) for r in table.rows))
