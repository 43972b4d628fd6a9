"""Scoring and report aggregation.

Structured runs are scored by exact match plus optional human annotations
(code correctness and a three-level content grade). Unstructured runs are
scored by ROUGE-1/2/L against the gold answer plus an optional boolean
content-correct annotation. Reports come out as JSON, fixed-width text
tables and TSV.

Denominators: exact match and ROUGE average over every run record of a
model (failed cases score as non-matches / zeros); annotation-based
percentages average over annotation records, one per (case, annotator).
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from ehrllm.tokens import tokenize

GRADES = ("satisfactory", "partially_satisfactory", "not_satisfactory")
ROUGE_KINDS = ("1", "2", "L")

_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")


class EmptyRunError(ValueError):
    pass


class AnnotationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid annotations:\n" + "\n".join(problems))


class RecordError(ValueError):
    pass


# -- exact match --------------------------------------------------------------

def canonical(text: str) -> str:
    return " ".join(text.split()).casefold()


def exact_match(expected: str, actual: str, strict: bool = False) -> bool:
    """Canonical equality; two numbers compare with relative tolerance 1e-9.

    ``strict`` switches to plain string equality for sensitivity checks.
    """
    if strict:
        return expected == actual
    a, b = canonical(expected), canonical(actual)
    if a == b:
        return True
    if _NUMBER_RE.fullmatch(a) and _NUMBER_RE.fullmatch(b):
        return math.isclose(float(a), float(b), rel_tol=1e-9, abs_tol=0.0)
    return False


# -- ROUGE --------------------------------------------------------------------

@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, n_candidate: int, n_reference: int) -> "RougeScore":
        if n_candidate == 0 or n_reference == 0:
            return cls(0.0, 0.0, 0.0)
        p, r = overlap / n_candidate, overlap / n_reference
        return cls(p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))


def rouge_tokens(text: str) -> list[str]:
    return [t.lower() for t in tokenize(text)]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = _ngrams(rouge_tokens(candidate), n), _ngrams(rouge_tokens(reference), n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    cand, ref = rouge_tokens(candidate), rouge_tokens(reference)
    return RougeScore.from_counts(lcs_length(cand, ref), len(cand), len(ref))


def rouge_all(candidate: str, reference: str) -> dict[str, RougeScore]:
    return {"1": rouge_n(candidate, reference, 1), "2": rouge_n(candidate, reference, 2),
            "L": rouge_l(candidate, reference)}


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    case_id: str
    modality: str
    model_id: str
    question: str
    final_answer: str
    gold_answer: str
    program_text: str | None = None
    raw_result: str | None = None
    failure: str | None = None
    failure_detail: str | None = None
    attempts: int | None = None
    retrieved_chunk_ids: list[int] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out


def read_run_records(path: str | Path) -> list[RunRecord]:
    records = []
    for i, obj in enumerate(read_jsonl(path), 1):
        try:
            records.append(RunRecord(**obj))
        except TypeError as exc:
            raise RecordError(f"{path}: record {i}: {exc}") from None
    return records


def records_to_jsonl(records: Iterable[RunRecord]) -> str:
    ordered = sorted(records, key=lambda r: (r.model_id, r.case_id))
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in ordered)


def check_records(records: Sequence[RunRecord], suite: Sequence) -> None:
    """Every record must name a suite case of the same modality."""
    by_id = {c.case_id: c for c in suite}
    for r in records:
        case = by_id.get(r.case_id)
        if case is None:
            raise RecordError(f"run record for unknown case {r.case_id!r}")
        if case.modality != r.modality:
            raise RecordError(f"{r.case_id}: record modality {r.modality} != case modality {case.modality}")


# -- annotations --------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationRecord:
    case_id: str
    model_id: str
    annotator_id: str
    code_correct: bool | None = None
    content_grade: str | None = None
    content_correct: bool | None = None


_ANNOTATION_FIELDS = {"case_id", "model_id", "annotator_id", "code_correct", "content_grade", "content_correct"}


def _annotation_problems(obj: Any, modality: str | None) -> list[str]:
    if not isinstance(obj, dict):
        return ["record must be a JSON object"]
    problems = []
    extra = set(obj) - _ANNOTATION_FIELDS
    if extra:
        problems.append(f"unknown field(s): {', '.join(sorted(extra))}")
    for key in ("case_id", "model_id", "annotator_id"):
        if not isinstance(obj.get(key), str) or not obj.get(key):
            problems.append(f"{key} must be a non-empty string")
    if modality is None:
        problems.append(f"unknown case_id {obj.get('case_id')!r}")
        return problems
    if modality == "structured":
        if obj.get("content_correct") is not None:
            problems.append("content_correct is for unstructured cases; use content_grade")
        grade = obj.get("content_grade")
        if grade is None:
            problems.append("structured cases need content_grade")
        elif grade not in GRADES:
            problems.append(f"bad content_grade {grade!r}; allowed values: {', '.join(GRADES)}")
        if obj.get("code_correct") is not None and not isinstance(obj["code_correct"], bool):
            problems.append("code_correct must be true, false or null")
    else:
        if obj.get("content_grade") is not None or obj.get("code_correct") is not None:
            problems.append("content_grade/code_correct are for structured cases; use content_correct")
        if not isinstance(obj.get("content_correct"), bool):
            problems.append("unstructured cases need content_correct true or false")
    return problems


def ingest_annotations(path: str | Path, suite: Sequence) -> list[AnnotationRecord]:
    """Read and validate an annotation file; every bad line is reported at once."""
    modality = {c.case_id: c.modality for c in suite}
    out, problems, seen = [], [], {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: not JSON ({exc})")
            continue
        case_id = obj.get("case_id") if isinstance(obj, dict) else None
        issues = _annotation_problems(obj, modality.get(case_id))
        if not issues:
            key = (obj["case_id"], obj["model_id"], obj["annotator_id"])
            if key in seen:
                issues.append(f"duplicate of line {seen[key]} for (case, model, annotator) {key}")
            else:
                seen[key] = lineno
        if issues:
            problems.extend(f"line {lineno}: {msg}" for msg in issues)
        else:
            out.append(AnnotationRecord(**obj))
    if problems:
        raise AnnotationError(problems)
    return out


# -- aggregation --------------------------------------------------------------

def _mean(values: Iterable[float]) -> float:
    values = sorted(values)
    return math.fsum(values) / len(values)


def _pct(count: int, total: int) -> float:
    return 100.0 * count / total


@dataclass(frozen=True)
class StructuredRow:
    model_id: str
    n_cases: int
    exact_match_pct: float
    n_annotated: int
    code_correct_pct: float | None
    grade_pct: dict[str, float] | None
    failures: dict[str, int]


@dataclass(frozen=True)
class UnstructuredRow:
    model_id: str
    n_cases: int
    n_annotated: int
    content_correct_pct: float | None
    rouge: dict[str, RougeScore]


@dataclass(frozen=True)
class EvalReport:
    structured: list[StructuredRow] = field(default_factory=list)
    unstructured: list[UnstructuredRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        return render_text(self)

    def to_tsv(self) -> str:
        return render_tsv(self)


def _structured_row(model_id: str, records: list[RunRecord], notes: list[AnnotationRecord]) -> StructuredRow:
    matches = sum(r.failure is None and exact_match(r.gold_answer, r.final_answer) for r in records)
    code = [a.code_correct for a in notes if a.code_correct is not None]
    grades = Counter(a.content_grade for a in notes)
    return StructuredRow(
        model_id=model_id,
        n_cases=len(records),
        exact_match_pct=_pct(matches, len(records)),
        n_annotated=len(notes),
        code_correct_pct=_pct(sum(code), len(code)) if code else None,
        grade_pct={g: _pct(grades[g], len(notes)) for g in GRADES} if notes else None,
        failures=dict(sorted(Counter(r.failure for r in records if r.failure).items())),
    )


def _unstructured_row(model_id: str, records: list[RunRecord], notes: list[AnnotationRecord]) -> UnstructuredRow:
    per_case = [rouge_all("" if r.failure else r.final_answer, r.gold_answer) for r in records]
    rouge = {
        kind: RougeScore(
            _mean(s[kind].precision for s in per_case),
            _mean(s[kind].recall for s in per_case),
            _mean(s[kind].f1 for s in per_case),
        )
        for kind in ROUGE_KINDS
    }
    return UnstructuredRow(
        model_id=model_id,
        n_cases=len(records),
        n_annotated=len(notes),
        content_correct_pct=_pct(sum(a.content_correct for a in notes), len(notes)) if notes else None,
        rouge=rouge,
    )


def aggregate_report(records: Sequence[RunRecord], annotations: Sequence[AnnotationRecord] = ()) -> EvalReport:
    """Fold run records (and optional annotations) into one row per (modality, model)."""
    if not records:
        raise EmptyRunError("no run records to evaluate")
    records = sorted(records, key=lambda r: (r.modality, r.model_id, r.case_id))
    modality_of = {(r.case_id, r.model_id): r.modality for r in records}
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.modality, r.model_id), []).append(r)
    notes: dict[tuple[str, str], list[AnnotationRecord]] = {}
    for a in sorted(annotations, key=lambda a: (a.model_id, a.case_id, a.annotator_id)):
        modality = modality_of.get((a.case_id, a.model_id))
        if modality is not None:
            notes.setdefault((modality, a.model_id), []).append(a)
    report = EvalReport()
    for (modality, model_id), group in groups.items():
        ann = notes.get((modality, model_id), [])
        if modality == "structured":
            report.structured.append(_structured_row(model_id, group, ann))
        else:
            report.unstructured.append(_unstructured_row(model_id, group, ann))
    return report


# -- rendering ----------------------------------------------------------------

NA = "n/a"


def fmt_pct(value: float | None) -> str:
    return NA if value is None else f"{value:.0f}%"


def fmt_score(value: float) -> str:
    return f"{value:.2f}"


def _fixed_width(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


STRUCTURED_HEADERS = [
    ["Model", "% of Exact Match Outputs", "Code Correctness", "Content correct of matches", "", ""],
    ["", "", "", "Satisfactory", "Partially Satisfactory", "Not Satisfactory"],
]
UNSTRUCTURED_HEADERS = [
    ["Model", "% of content correct of matches", "Precision", "", "", "Recall", "", "", "F1 Score", "", ""],
    ["", "", "R1", "R2", "RL", "R1", "R2", "RL", "R1", "R2", "RL"],
]


def structured_cells(row: StructuredRow) -> list[str]:
    grades = [fmt_pct(row.grade_pct[g]) if row.grade_pct else NA for g in GRADES]
    return [row.model_id, fmt_pct(row.exact_match_pct), fmt_pct(row.code_correct_pct), *grades]


def unstructured_cells(row: UnstructuredRow) -> list[str]:
    cells = [row.model_id, fmt_pct(row.content_correct_pct)]
    for part in ("precision", "recall", "f1"):
        cells += [fmt_score(getattr(row.rouge[k], part)) for k in ROUGE_KINDS]
    return cells


def render_text(report: EvalReport) -> str:
    blocks = []
    if report.structured:
        rows = STRUCTURED_HEADERS + [structured_cells(r) for r in report.structured]
        blocks.append("Structured data: question -> query program results\n\n" + _fixed_width(rows))
    if report.unstructured:
        rows = UNSTRUCTURED_HEADERS + [unstructured_cells(r) for r in report.unstructured]
        blocks.append("Unstructured data: RAG results\n\n" + _fixed_width(rows))
    return "\n".join(blocks)


def _num(value: float | None) -> str:
    return NA if value is None else f"{value:.6f}"


def render_tsv(report: EvalReport) -> str:
    """Unrounded numbers, one row per model, ``n/a`` where annotations are missing."""
    lines = []
    if report.structured:
        lines.append("\t".join(["modality", "model", "n_cases", "exact_match_pct", "n_annotated",
                                "code_correct_pct", *(f"{g}_pct" for g in GRADES)]))
        for r in report.structured:
            grades = [_num(r.grade_pct[g]) if r.grade_pct else NA for g in GRADES]
            lines.append("\t".join(["structured", r.model_id, str(r.n_cases), _num(r.exact_match_pct),
                                    str(r.n_annotated), _num(r.code_correct_pct), *grades]))
    if report.unstructured:
        lines.append("\t".join(["modality", "model", "n_cases", "n_annotated", "content_correct_pct",
                                *(f"{p}_R{k}" for p in ("precision", "recall", "f1") for k in ROUGE_KINDS)]))
        for r in report.unstructured:
            scores = [_num(getattr(r.rouge[k], p)) for p in ("precision", "recall", "f1") for k in ROUGE_KINDS]
            lines.append("\t".join(["unstructured", r.model_id, str(r.n_cases), str(r.n_annotated),
                                    _num(r.content_correct_pct), *scores]))
    return "\n".join(lines) + "\n"
