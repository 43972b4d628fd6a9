"""Synthetic evaluation suites.

Structured cases come from question templates paired with gold programs; the
gold answer is whatever the query engine returns for that program, never a
model's output. Unstructured cases are one question per document segment,
written by a model when one is configured and by regex rules otherwise.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import yaml

from ehrllm.agent import render_result
from ehrllm.gateway import ChatMessage, ChatRequest, GatewayError, ModelEndpoint
from ehrllm.query import (
    ExecutionContext,
    ExecutionError,
    ParseError,
    ValidationError,
    execute_program,
    operation_count,
    parse_program,
    validate_program,
)
from ehrllm.query.ast import Aggregate, Derive, quote
from ehrllm.rng import SplitMix64, derive_seed
from ehrllm.tabular import Table, format_cell
from ehrllm.tokens import detokenize, tokenize

logger = logging.getLogger(__name__)

MODALITIES = ("structured", "unstructured")


class TemplateError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Complexity:
    preprocessing_required: bool
    aggregation: str | None
    operation_count: int


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # keep pytest from collecting this class

    case_id: str
    modality: str
    question: str
    gold_answer: str
    complexity: Complexity | None = None
    source_segment_id: int | None = None
    gold_program_text: str | None = None
    template_id: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not self.gold_answer:
            raise ValueError(f"{self.case_id}: empty gold answer")
        if self.modality == "structured" and (self.complexity is None or self.gold_program_text is None):
            raise ValueError(f"{self.case_id}: structured cases need complexity and a gold program")
        if self.modality == "unstructured" and self.source_segment_id is None:
            raise ValueError(f"{self.case_id}: unstructured cases need a source segment")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TestCase":
        d = dict(d)
        if d.get("complexity") is not None:
            d["complexity"] = Complexity(**d["complexity"])
        return cls(**d)


@dataclass(frozen=True)
class Segment:
    segment_id: int
    token_start: int
    token_end: int
    text: str


# -- suite files --------------------------------------------------------------

def suite_to_jsonl(cases: Sequence[TestCase]) -> str:
    ordered = sorted(cases, key=lambda c: c.case_id)
    return "".join(json.dumps(c.to_dict(), ensure_ascii=False) + "\n" for c in ordered)


def write_suite(cases: Sequence[TestCase], path: str | Path) -> None:
    Path(path).write_text(suite_to_jsonl(cases), encoding="utf-8")


def read_suite(path: str | Path) -> list[TestCase]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(TestCase.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


# -- structured suite ---------------------------------------------------------

@dataclass(frozen=True)
class QuestionTemplate:
    id: str
    question: str
    program: str
    slots: dict
    tags: dict


def _load_yaml(path: str | Path | None, default: str) -> list[dict]:
    if path is None:
        text = resources.files("ehrllm.data").joinpath(default).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or []
    if not isinstance(data, list):
        raise TemplateError("template file must contain a list of entries")
    return data


def load_structured_templates(path: str | Path | None = None) -> list[QuestionTemplate]:
    """Read a template file; the packaged defaults when ``path`` is None."""
    out = []
    for i, entry in enumerate(_load_yaml(path, "structured_templates.yaml")):
        try:
            out.append(QuestionTemplate(
                id=str(entry["id"]),
                question=entry["question"],
                program=entry["program"],
                slots=entry.get("slots") or {},
                tags=entry.get("tags") or {},
            ))
        except (KeyError, TypeError) as exc:
            raise TemplateError(f"template #{i + 1}: missing field {exc}") from None
    ids = [t.id for t in out]
    if len(set(ids)) != len(ids):
        raise TemplateError("duplicate template ids")
    return out


_SLOT_RE = re.compile(r"\{(\w+)\}")


def _fill(pattern: str, values: dict[str, str], template_id: str) -> str:
    def sub(m):
        name = m.group(1)
        if name not in values:
            raise TemplateError(f"template {template_id!r}: no value for slot {{{name}}}")
        return values[name]

    return _SLOT_RE.sub(sub, pattern)


def _draw_slots(tpl: QuestionTemplate, table: Table, rng: SplitMix64) -> tuple[dict, dict]:
    question_values, program_values = {}, {}
    for name in sorted(tpl.slots):
        spec = tpl.slots[name]
        if "column" in spec:
            column = spec["column"]
            if column not in table.schema:
                raise TemplateError(f"template {tpl.id!r}: slot {name!r} refers to unknown column {column!r}")
            values = sorted({v for v in table.column(column) if v is not None}, key=format_cell)
            if not values:
                raise TemplateError(f"template {tpl.id!r}: column {column!r} has no values to draw")
        elif "choices" in spec:
            values = list(spec["choices"])
        else:
            raise TemplateError(f"template {tpl.id!r}: slot {name!r} needs 'column' or 'choices'")
        value = rng.choice(values)
        raw = format_cell(value)
        program_values[name] = quote(raw)[1:-1] if isinstance(value, str) else raw
        shown = str((spec.get("labels") or {}).get(raw, raw))
        question_values[name] = shown
        if "as" in spec:
            question_values[spec["as"]] = shown
    return question_values, program_values


def complexity_of(program) -> Complexity:
    aggs = [s.func for s in program.stages if isinstance(s, Aggregate)]
    return Complexity(
        preprocessing_required=any(isinstance(s, Derive) for s in program.stages),
        aggregation=aggs[0] if aggs else None,
        operation_count=operation_count(program),
    )


def _check_tags(tpl: QuestionTemplate, cx: Complexity) -> None:
    expected = {
        "operations": cx.operation_count,
        "preprocessing": cx.preprocessing_required,
        "aggregation": cx.aggregation,
    }
    for key, value in tpl.tags.items():
        if key not in expected:
            raise TemplateError(f"template {tpl.id!r}: unknown tag {key!r}")
        if value != expected[key]:
            raise TemplateError(f"template {tpl.id!r}: tag {key}={value!r} but program gives {expected[key]!r}")


def generate_structured_suite(
    table: Table,
    ctx: ExecutionContext,
    templates: Sequence[QuestionTemplate] | None = None,
    seed: int = 0,
    n: int = 30,
    skipped: list | None = None,
) -> list[TestCase]:
    """Instantiate ``n`` cases, cycling through ``templates`` in order.

    Slot values for case ``i`` come from a stream seeded by ``(seed, i)``, so
    a case does not depend on the ones before it. A case whose gold program
    fails to execute is left out and reported through ``skipped``.
    """
    templates = list(templates) if templates is not None else load_structured_templates()
    if not templates:
        raise TemplateError("no templates")
    cases = []
    for i in range(n):
        tpl = templates[i % len(templates)]
        rng = SplitMix64(derive_seed(seed, "structured", i))
        q_values, p_values = _draw_slots(tpl, table, rng)
        question = _fill(tpl.question, q_values, tpl.id)
        program_text = _fill(tpl.program, p_values, tpl.id)
        try:
            program = parse_program(program_text)
            validated = validate_program(program, table.schema)
        except (ParseError, ValidationError) as exc:
            raise TemplateError(f"template {tpl.id!r}: gold program is invalid: {exc}") from None
        cx = complexity_of(program)
        _check_tags(tpl, cx)
        case_id = f"S{i + 1:03d}"
        try:
            result = execute_program(validated, table, ctx)
        except ExecutionError as exc:
            logger.warning("%s (%s): gold program failed: %s", case_id, tpl.id, exc)
            if skipped is not None:
                skipped.append((case_id, f"{tpl.id}: {exc}"))
            continue
        cases.append(TestCase(
            case_id=case_id,
            modality="structured",
            question=question,
            gold_answer=render_result(result),
            complexity=cx,
            gold_program_text=str(program),
            template_id=tpl.id,
        ))
    return cases


# -- unstructured suite -------------------------------------------------------

def equal_segments(tokens: Sequence[str], n: int) -> list[Segment]:
    """Split into ``n`` contiguous parts whose sizes differ by at most one token."""
    base, extra = divmod(len(tokens), n)
    out, start = [], 0
    for i in range(n):
        end = start + base + (1 if i < extra else 0)
        out.append(Segment(i, start, end, detokenize(tokens[start:end])))
        start = end
    return out


SEGMENT_PROMPT = (
    "Split the clinical note below into exactly {n} semantically coherent segments. "
    "The note has {total} tokens, listed as index:token. Reply with a JSON list of the "
    "{n} token indices at which segments start; the first must be 0 and the list must be "
    "strictly increasing.\n\n{listing}"
)


def _cut_points(reply: str, n: int, total: int) -> list[int] | None:
    m = re.search(r"\[[^\[\]]*\]", reply)
    if not m:
        return None
    try:
        cuts = json.loads(m.group())
    except json.JSONDecodeError:
        return None
    if (len(cuts) != n or not all(isinstance(c, int) and not isinstance(c, bool) for c in cuts)
            or cuts[0] != 0 or cuts[-1] >= total
            or any(a >= b for a, b in zip(cuts, cuts[1:]))):
        return None
    return cuts


def segment_document(
    doc: str,
    n: int = 50,
    endpoint: ModelEndpoint | None = None,
    allow_fallback: bool = True,
) -> list[Segment]:
    """Partition the document's tokens into ``n`` segments.

    With an endpoint the model proposes segment start indices; an unusable
    proposal falls back to the equal-size split unless ``allow_fallback`` is
    off. Either way the segments partition ``[0, len(tokens))``.
    """
    tokens = tokenize(doc)
    if n < 1:
        raise SegmentationError("n must be >= 1")
    if len(tokens) < n:
        raise SegmentationError(f"document has {len(tokens)} tokens, fewer than {n} segments")
    if endpoint is None:
        return equal_segments(tokens, n)
    listing = " ".join(f"{i}:{t}" for i, t in enumerate(tokens))
    prompt = SEGMENT_PROMPT.format(n=n, total=len(tokens), listing=listing)
    try:
        reply = endpoint.complete(ChatRequest.simple(endpoint.endpoint_id, prompt, max_output_tokens=4 * n + 16)).content
        cuts = _cut_points(reply, n, len(tokens))
    except GatewayError as exc:
        logger.warning("segmentation call failed: %s", exc)
        cuts = None
    if cuts is None:
        if not allow_fallback:
            raise SegmentationError("model did not return usable cut points")
        logger.warning("falling back to equal-size segmentation")
        return equal_segments(tokens, n)
    bounds = cuts + [len(tokens)]
    return [Segment(i, a, b, detokenize(tokens[a:b])) for i, (a, b) in enumerate(zip(bounds, bounds[1:]))]


@dataclass(frozen=True)
class QuestionRule:
    id: str
    pattern: re.Pattern
    question: str
    answer: str


def load_question_rules(path: str | Path | None = None) -> list[QuestionRule]:
    rules = []
    for i, entry in enumerate(_load_yaml(path, "unstructured_templates.yaml")):
        try:
            rules.append(QuestionRule(str(entry["id"]), re.compile(entry["pattern"]),
                                      entry["question"], entry["answer"]))
        except (KeyError, TypeError, re.error) as exc:
            raise TemplateError(f"question rule #{i + 1}: {exc}") from None
    return rules


_RULE_SLOT_RE = re.compile(r"\{(\w+)(\|lower)?\}")


def _fill_rule(text: str, groups: dict[str, str]) -> str:
    def sub(m):
        value = groups[m.group(1)]
        if m.group(2) and value:
            value = value[0].lower() + value[1:]
        return value

    return _RULE_SLOT_RE.sub(sub, text)


def generic_question(segment: Segment) -> str:
    core = segment.text.rstrip(" .;:!?")
    return f"According to the note, {core}?"


def template_question(segment: Segment, rules: Sequence[QuestionRule]) -> tuple[str, str, str]:
    """``(question, answer, rule_id)`` for one segment using the first matching rule."""
    for rule in rules:
        m = rule.pattern.search(segment.text)
        if m:
            groups = {k: v for k, v in m.groupdict().items() if v is not None}
            return _fill_rule(rule.question, groups), _fill_rule(rule.answer, groups), rule.id
    return generic_question(segment), segment.text, "generic"


QA_PROMPT = (
    "Here is a passage from a clinical note:\n\n{text}\n\n"
    "Write one question that can be answered solely from this passage, and its answer. "
    'Reply with JSON only: {{"question": "...", "answer": "..."}}'
)


def _parse_qa(reply: str) -> tuple[str, str] | None:
    m = re.search(r"\{.*\}", reply, re.DOTALL)
    if not m:
        return None
    try:
        obj = json.loads(m.group())
    except json.JSONDecodeError:
        return None
    q, a = obj.get("question") if isinstance(obj, dict) else None, obj.get("answer") if isinstance(obj, dict) else None
    if not isinstance(q, str) or not isinstance(a, str) or not q.strip() or not a.strip():
        return None
    return q.strip(), a.strip()


def generate_unstructured_suite(
    segments: Sequence[Segment],
    endpoint: ModelEndpoint | None = None,
    rules: Sequence[QuestionRule] | None = None,
    skipped: list | None = None,
) -> list[TestCase]:
    """One question-answer case per segment.

    A model reply that is not a ``{"question", "answer"}`` object gets one
    retry; after that the segment is skipped and reported. When a scripted
    stub has no entry for a segment, the regex rules are used instead.
    """
    rules = list(rules) if rules is not None else load_question_rules()
    cases = []
    for seg in segments:
        case_id = f"U{seg.segment_id + 1:03d}"
        pair, source = None, "template"
        if endpoint is not None:
            messages = [ChatMessage("user", QA_PROMPT.format(text=seg.text))]
            try:
                for attempt in range(2):
                    reply = endpoint.complete(ChatRequest(tuple(messages), endpoint.endpoint_id)).content
                    pair = _parse_qa(reply)
                    if pair is not None:
                        source = "model"
                        break
                    messages += [ChatMessage("assistant", reply or "(empty)"),
                                 ChatMessage("user", 'Reply with JSON only: {"question": "...", "answer": "..."}')]
                if pair is None:
                    logger.warning("%s: no usable question/answer from the model; skipped", case_id)
                    if skipped is not None:
                        skipped.append((case_id, "unparseable model reply"))
                    continue
            except GatewayError as exc:
                logger.info("%s: model unavailable (%s); using template rules", case_id, exc)
        if pair is None:
            question, answer, source = template_question(seg, rules)
        else:
            question, answer = pair
        cases.append(TestCase(
            case_id=case_id,
            modality="unstructured",
            question=question,
            gold_answer=answer,
            source_segment_id=seg.segment_id,
            template_id=source,
        ))
    return cases


def default_note() -> str:
    """The packaged synthetic discharge note (50 sentences of 16 tokens)."""
    return resources.files("ehrllm.data").joinpath("clinical_note.txt").read_text(encoding="utf-8")

