"""Question -> query program -> validated execution -> phrased answer.

The model never runs code of its own: whatever it replies is parsed as a query
program and checked against the table schema, and only a program that passes
both steps reaches :func:`~ehrllm.query.execute_program`.
"""

from __future__ import annotations

import datetime as dt
import logging
import re
from dataclasses import dataclass
from typing import Any

from ehrllm.gateway import ChatMessage, ChatRequest, GatewayError, ModelEndpoint, NoScriptMatch
from ehrllm.query import (
    SUMMARY,
    ExecutionContext,
    ExecutionError,
    ParseError,
    ValidatedProgram,
    ValidationError,
    execute_program,
    parse_program,
    validate_program,
)
from ehrllm.tabular import Schema, Table

logger = logging.getLogger(__name__)

FAILURE_KINDS = ("generation", "parse", "validation", "execution", "postprocess")

_FENCE_RE = re.compile(r"```[^\n`]*\n?(.*?)```", re.DOTALL)

PHRASING_TEMPLATE = (
    "Question: {question}\n"
    "Query program that was run:\n{program}\n"
    "Result:\n{result}\n\n"
    "Answer the question using only this result. "
    "Reply with the answer alone (a number, date or short phrase), without explanation."
)


@dataclass(frozen=True)
class RepairPolicy:
    max_repairs: int = 1

    def __post_init__(self):
        if self.max_repairs < 0:
            raise ValueError("max_repairs must be >= 0")


@dataclass(frozen=True)
class AgentAnswer:
    question: str
    program_text: str
    program: ValidatedProgram | None
    raw_result: Any
    final_answer: str
    failure: str | None
    failure_detail: str | None
    attempts: int

    def to_record(self) -> dict:
        return {
            "question": self.question,
            "program_text": self.program_text,
            "raw_result": None if self.failure else render_result(self.raw_result),
            "final_answer": self.final_answer,
            "failure": self.failure,
            "failure_detail": self.failure_detail,
            "attempts": self.attempts,
        }


def render_value(value: Any) -> str:
    """Canonical scalar text: plain integers, floats to 6 significant digits, ISO dates."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = format(value, ".6g")
        return "0" if text == "-0" else text
    if isinstance(value, dt.date):
        return value.isoformat()
    return str(value)


def render_result(result: Any) -> str:
    if isinstance(result, Table):
        lines = [", ".join(result.schema.names)]
        lines += [", ".join(render_value(v) for v in row) for row in result.rows]
        return "\n".join(lines)
    return render_value(result)


def build_system_prompt(schema: Schema, grammar_doc: str = SUMMARY) -> str:
    """The one system prompt every model gets for a given schema."""
    if len(schema) == 0:
        raise ValueError("cannot build a prompt for an empty schema")
    columns = "\n".join(f"- {c.name} ({c.kind})" for c in schema.columns)
    return (
        "You answer questions about a clinical dataset by writing a program in a small "
        "query language. The program is validated against the column list and then run "
        "on the data; you never see the rows.\n\n"
        f"The dataset is a single table with these columns:\n{columns}\n\n"
        f"Query language:\n{grammar_doc.strip()}\n\n"
        "Reply with the program only. Do not explain it and do not write any other code."
    )


def extract_program(reply: str) -> str:
    """First fenced code block if there is one, else the whole reply."""
    m = _FENCE_RE.search(reply)
    return (m.group(1) if m else reply).strip()


def _failed(question, text, program, kind, detail, attempts) -> AgentAnswer:
    return AgentAnswer(question, text, program, None, "", kind, detail, attempts)


def answer_structured_question(
    question: str,
    table: Table,
    ctx: ExecutionContext,
    endpoint: ModelEndpoint,
    policy: RepairPolicy = RepairPolicy(),
    system_prompt: str | None = None,
) -> AgentAnswer:
    system = system_prompt or build_system_prompt(table.schema)
    model_id = endpoint.endpoint_id
    messages = [ChatMessage("system", system), ChatMessage("user", question)]
    attempts = 0
    text = ""
    rejected: tuple[str, str] | None = None
    while True:
        attempts += 1
        try:
            reply = endpoint.complete(ChatRequest(tuple(messages), model_id)).content
        except NoScriptMatch as exc:
            if rejected is not None:
                # a stub with no repair entry leaves the earlier rejection standing
                return _failed(question, text, None, *rejected, attempts - 1)
            return _failed(question, text, None, "generation", f"{type(exc).__name__}: {exc}", attempts)
        except GatewayError as exc:
            return _failed(question, text, None, "generation", f"{type(exc).__name__}: {exc}", attempts)
        text = extract_program(reply)
        try:
            validated = validate_program(parse_program(text), table.schema)
            break
        except (ParseError, ValidationError) as exc:
            kind = "parse" if isinstance(exc, ParseError) else "validation"
            if attempts > policy.max_repairs:
                return _failed(question, text, None, kind, str(exc), attempts)
            rejected = (kind, str(exc))
            messages += [
                ChatMessage("assistant", reply or "(empty reply)"),
                ChatMessage("user", f"The program was rejected: {exc}\nReply with a corrected program only."),
            ]

    try:
        result = execute_program(validated, table, ctx)
    except ExecutionError as exc:
        return _failed(question, text, validated, "execution", str(exc), attempts)

    rendered = render_result(result)
    phrasing = ChatRequest.simple(
        model_id, PHRASING_TEMPLATE.format(question=question, program=text, result=rendered)
    )
    try:
        final = endpoint.complete(phrasing).content.strip()
    except NoScriptMatch:
        final = rendered
    except GatewayError as exc:
        return _failed(question, text, validated, "postprocess", f"{type(exc).__name__}: {exc}", attempts)
    if not final:
        return _failed(question, text, validated, "postprocess", "empty phrasing reply", attempts)
    return AgentAnswer(question, text, validated, result, final, None, None, attempts)
