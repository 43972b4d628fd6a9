"""Run a generated suite through one model endpoint and collect run records."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Mapping, Sequence, TypeVar

from ehrllm.agent import RepairPolicy, answer_structured_question, build_system_prompt
from ehrllm.evaluator import RunRecord
from ehrllm.gateway import GatewayError, ModelEndpoint
from ehrllm.query import ExecutionContext
from ehrllm.rag import Chunk, Embedder, RetrievalConfig, VectorIndex, answer_unstructured_question
from ehrllm.tabular import Table
from ehrllm.testgen import TestCase

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally on a thread pool; output order follows input order.

    Scripted stubs with ``ordinal`` rules depend on call order, so they need
    ``workers=1``.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_structured(
    suite: Sequence[TestCase],
    table: Table,
    ctx: ExecutionContext,
    endpoint: ModelEndpoint,
    policy: RepairPolicy = RepairPolicy(),
    workers: int = 1,
) -> list[RunRecord]:
    system = build_system_prompt(table.schema)
    cases = sorted((c for c in suite if c.modality == "structured"), key=lambda c: c.case_id)

    def one(case: TestCase) -> RunRecord:
        ans = answer_structured_question(case.question, table, ctx, endpoint, policy, system_prompt=system)
        rec = ans.to_record()
        return RunRecord(
            case_id=case.case_id,
            modality="structured",
            model_id=endpoint.endpoint_id,
            question=case.question,
            final_answer=ans.final_answer,
            gold_answer=case.gold_answer,
            program_text=ans.program_text,
            raw_result=rec["raw_result"],
            failure=ans.failure,
            failure_detail=ans.failure_detail,
            attempts=ans.attempts,
        )

    return map_ordered(one, cases, workers)


def run_unstructured(
    suite: Sequence[TestCase],
    index: VectorIndex,
    chunks: Mapping[int, Chunk] | Sequence[Chunk],
    endpoint: ModelEndpoint,
    embedder: Embedder,
    cfg: RetrievalConfig = RetrievalConfig(),
    workers: int = 1,
) -> list[RunRecord]:
    cases = sorted((c for c in suite if c.modality == "unstructured"), key=lambda c: c.case_id)
    if not isinstance(chunks, Mapping):
        chunks = {c.chunk_id: c for c in chunks}

    def one(case: TestCase) -> RunRecord:
        base = dict(case_id=case.case_id, modality="unstructured", model_id=endpoint.endpoint_id,
                    question=case.question, gold_answer=case.gold_answer)
        try:
            ans = answer_unstructured_question(case.question, index, chunks, endpoint, cfg, embedder)
        except GatewayError as exc:
            return RunRecord(**base, final_answer="", failure="generation",
                             failure_detail=f"{type(exc).__name__}: {exc}")
        return RunRecord(**base, final_answer=ans.answer,
                         retrieved_chunk_ids=[cid for cid, _ in ans.retrieved])

    return map_ordered(one, cases, workers)


def run_status(records: Sequence[RunRecord]) -> str:
    """``"ok"``, ``"partial"`` (some cases hit endpoint failures) or ``"endpoint"`` (all did)."""
    failed = sum(r.failure == "generation" for r in records)
    if records and failed == len(records):
        return "endpoint"
    return "partial" if failed else "ok"
