"""Command-line entry point: ``ehrllm <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 endpoint error,
4 partial run (some cases hit endpoint failures such as an exhausted budget).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from ehrllm import __version__
from ehrllm.agent import answer_structured_question, render_result
from ehrllm.config import ConfigError, RunConfig, default_config_text, load_config
from ehrllm.evaluator import (
    AnnotationError,
    EmptyRunError,
    RecordError,
    aggregate_report,
    check_records,
    ingest_annotations,
    read_run_records,
    records_to_jsonl,
)
from ehrllm.fixtures import write_fixture_dataset, write_jsonl
from ehrllm.gateway import GatewayError, ModelEndpoint, RunJournal, ScriptError
from ehrllm.query import ExecutionContext
from ehrllm.rag import index_document, load_index, save_index
from ehrllm.runner import run_status, run_structured, run_unstructured
from ehrllm.tabular import (
    TableError,
    join_cohort,
    load_csv,
    project_columns,
    read_schema,
    sample_cohort,
    schema_to_text,
    synthesize_dob,
    table_to_csv,
)
from ehrllm.testgen import (
    SegmentationError,
    TemplateError,
    default_note,
    generate_structured_suite,
    generate_unstructured_suite,
    load_question_rules,
    load_structured_templates,
    read_suite,
    segment_document,
    suite_to_jsonl,
)

logger = logging.getLogger("ehrllm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ENDPOINT, EXIT_PARTIAL = 0, 1, 2, 3, 4

DATASET_CSV = "dataset.csv"
DATASET_SCHEMA = "dataset.schema"
ECHO_PATTERN = r"(?s)Context:\n(.*?)\n\nQuestion:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def suite_path(cfg: RunConfig, modality: str) -> Path:
    return cfg.output_dir / f"suite_{modality}.jsonl"


def runs_path(cfg: RunConfig, modality: str, model_id: str) -> Path:
    return cfg.output_dir / f"runs_{modality}_{model_id}.jsonl"


def load_dataset(cfg: RunConfig):
    csv_path, schema_path = cfg.output_dir / DATASET_CSV, cfg.output_dir / DATASET_SCHEMA
    if not csv_path.is_file():
        raise FileNotFoundError(f"no ingested dataset at {csv_path}; run 'ehrllm ingest' first")
    return load_csv(csv_path, schema_hint=read_schema(schema_path))


def open_endpoint(cfg: RunConfig, model_id: str, journal_name: str) -> ModelEndpoint:
    try:
        ep_cfg = cfg.endpoint(model_id)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    journal = RunJournal(cfg.output_dir / f"journal_{journal_name}.jsonl")
    return ModelEndpoint(ep_cfg, journal=journal)


# -- commands -----------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    missing = [t for t in ("patients", "prescriptions", "diagnoses", "d_icd") if t not in cfg.tables]
    if missing:
        raise ConfigError(f"dataset.structured_tables is missing {', '.join(missing)}")
    t = {name: load_csv(path, kinds=cfg.column_kinds) for name, path in cfg.tables.items()}
    cohort = synthesize_dob(sample_cohort(t["patients"], cfg.cohort), cfg.cohort)
    merged = join_cohort(cohort, t["prescriptions"], t["diagnoses"], t["d_icd"])
    dataset = project_columns(merged, cfg.features)
    if cfg.total_records is not None and len(dataset) != cfg.total_records:
        logger.warning("merged dataset has %d rows, config expects %d", len(dataset), cfg.total_records)
    write_atomic(cfg.output_dir / DATASET_CSV, table_to_csv(dataset))
    write_atomic(cfg.output_dir / DATASET_SCHEMA, schema_to_text(dataset.schema))
    print(f"rows={len(dataset)}, cols={len(dataset.schema)}")
    return EXIT_OK


def cmd_testgen(cfg: RunConfig, args) -> int:
    skipped: list = []
    generator = open_endpoint(cfg, cfg.generator_model, "testgen") if cfg.generator_model else None
    if args.modality == "structured":
        table = load_dataset(cfg)
        templates = load_structured_templates(cfg.structured_templates)
        cases = generate_structured_suite(table, ExecutionContext(cfg.reference_date), templates,
                                          cfg.seed, cfg.n_structured, skipped)
    else:
        if cfg.note is None:
            raise ConfigError("dataset.unstructured_source is not set")
        doc = cfg.note.read_text(encoding="utf-8")
        segments = segment_document(doc, cfg.n_segments, generator)
        write_atomic(cfg.output_dir / "segments.jsonl",
                     "".join(json.dumps(s.__dict__, ensure_ascii=False) + "\n" for s in segments))
        cases = generate_unstructured_suite(segments, generator, load_question_rules(cfg.question_rules), skipped)
    out = suite_path(cfg, args.modality)
    write_atomic(out, suite_to_jsonl(cases))
    for case_id, why in skipped:
        print(f"skipped {case_id}: {why}", file=sys.stderr)
    print(f"cases={len(cases)} -> {out}")
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_run(cfg: RunConfig, args) -> int:
    suite = read_suite(suite_path(cfg, args.modality))
    endpoint = open_endpoint(cfg, args.model, f"{args.modality}_{args.model}")
    if args.modality == "structured":
        table = load_dataset(cfg)
        records = run_structured(suite, table, ExecutionContext(cfg.reference_date), endpoint,
                                 cfg.repair, cfg.workers)
    else:
        if cfg.note is None:
            raise ConfigError("dataset.unstructured_source is not set")
        embedder = cfg.embedder.build()
        index, chunks = index_document(cfg.note.read_text(encoding="utf-8"), embedder, cfg.chunking,
                                       doc_id=cfg.note.name)
        index_dir = cfg.output_dir / "index"
        save_index(index, chunks, index_dir)
        index, chunks = load_index(index_dir)
        records = run_unstructured(suite, index, chunks, endpoint, embedder, cfg.retrieval, cfg.workers)
    out = runs_path(cfg, args.modality, args.model)
    write_atomic(out, records_to_jsonl(records))
    failed = sum(r.failure is not None for r in records)
    print(f"records={len(records)} failures={failed} tokens={endpoint.journal.charged_tokens()} -> {out}")
    status = run_status(records)
    return {"ok": EXIT_OK, "partial": EXIT_PARTIAL, "endpoint": EXIT_ENDPOINT}[status]


def cmd_eval(cfg: RunConfig, args) -> int:
    records = []
    for path in args.records:
        records += read_run_records(path)
    if not records:
        raise EmptyRunError("no run records in " + ", ".join(args.records))
    suite = []
    for modality in sorted({r.modality for r in records}):
        p = suite_path(cfg, modality)
        if p.is_file():
            suite += read_suite(p)
    if suite:
        check_records(records, suite)
    annotations = ingest_annotations(args.annotations, suite) if args.annotations else []
    report = aggregate_report(records, annotations)
    out = Path(args.out) if args.out else cfg.output_dir
    write_atomic(out / f"{args.stem}.json", report.to_json())
    write_atomic(out / f"{args.stem}.txt", report.to_text())
    write_atomic(out / f"{args.stem}.tsv", report.to_tsv())
    if not args.no_plots:
        from ehrllm.plots import plot_report

        out.mkdir(parents=True, exist_ok=True)
        plot_report(report, out, args.stem)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_query(cfg: RunConfig, args) -> int:
    table = load_dataset(cfg)
    endpoint = open_endpoint(cfg, args.model, f"query_{args.model}")
    ans = answer_structured_question(args.question, table, ExecutionContext(cfg.reference_date),
                                     endpoint, cfg.repair)
    print(f"program: {ans.program_text}")
    if ans.failure:
        print(f"failure: {ans.failure}: {ans.failure_detail}")
        return EXIT_ENDPOINT if ans.failure == "generation" else EXIT_OK
    print("result:\n" + render_result(ans.raw_result))
    print(f"answer: {ans.final_answer}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    root = Path(args.directory)
    write_fixture_dataset(root / "tables", args.patients, args.seed)
    write_atomic(root / "note.txt", default_note())
    write_jsonl([{"any": True, "echo": ECHO_PATTERN}], root / "stubs" / "echo_stub.jsonl")
    config = root / "config.yaml"
    if not config.exists() or args.force:
        write_atomic(config, default_config_text())
    print(f"fixtures written to {root}")
    return EXIT_OK


def cmd_make_stub(args) -> int:
    """Stub script that answers each structured question with its gold program.

    ``--corrupt N`` replaces the first N replies with prose so they fail to
    parse; useful for checking that reports count failures.
    """
    cases = [c for c in read_suite(args.suite) if c.modality == "structured"]
    records = []
    for i, case in enumerate(sorted(cases, key=lambda c: c.case_id)):
        reply = "I am not able to write that query." if i < args.corrupt else case.gold_program_text
        records.append({"prompt": case.question, "reply": reply})
    write_jsonl(records, args.out)
    print(f"rules={len(records)} -> {args.out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehrllm", description="Question answering over clinical tables and notes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("-c", "--config", required=True, help="run configuration (YAML)")
        return p

    with_config(sub.add_parser("ingest", help="sample, join and persist the analysis dataset"))

    p = with_config(sub.add_parser("testgen", help="generate an evaluation suite"))
    p.add_argument("--modality", required=True, choices=("structured", "unstructured"))

    p = with_config(sub.add_parser("run", help="run a suite through one model"))
    p.add_argument("--modality", required=True, choices=("structured", "unstructured"))
    p.add_argument("--model", required=True, help="model id from the config")

    p = with_config(sub.add_parser("eval", help="score run records and write reports"))
    p.add_argument("records", nargs="+", help="run-record files")
    p.add_argument("--annotations", help="human annotation file (JSONL)")
    p.add_argument("--out", help="report directory (default: the config output_dir)")
    p.add_argument("--stem", default="report", help="report file name stem")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    p = with_config(sub.add_parser("query", help="answer one structured question"))
    p.add_argument("--model", required=True)
    p.add_argument("question")

    p = sub.add_parser("fixtures", help="write synthetic tables, a note, stubs and a config")
    p.add_argument("directory")
    p.add_argument("--patients", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite an existing config.yaml")

    p = sub.add_parser("make-stub", help="scripted stub replying with a suite's gold programs")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corrupt", type=int, default=0, help="replace the first N replies with prose")
    return parser


COMMANDS = {"ingest": cmd_ingest, "testgen": cmd_testgen, "run": cmd_run, "eval": cmd_eval, "query": cmd_query}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fixtures":
            return cmd_fixtures(args)
        if args.command == "make-stub":
            return cmd_make_stub(args)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"ehrllm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"ehrllm: endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (FileNotFoundError, ConfigError, TableError, TemplateError, SegmentationError, ScriptError,
            RecordError, AnnotationError, EmptyRunError, ValueError) as exc:
        print(f"ehrllm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
