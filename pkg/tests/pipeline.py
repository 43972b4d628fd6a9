"""Drive the full offline pipeline through the CLI entry point."""

from __future__ import annotations

import contextlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from ehrllm.cli import main


@dataclass
class CliResult:
    code: int
    out: str
    err: str


def cli(*argv) -> CliResult:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:  # argparse exits
            code = exc.code if isinstance(exc.code, int) else 1
    return CliResult(code, out.getvalue(), err.getvalue())


@dataclass
class PipelineRun:
    root: Path
    steps: dict[str, CliResult] = field(default_factory=dict)

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def out(self) -> Path:
        return self.root / "out"


def run_offline_pipeline(root: Path, corrupt: int = 0, plots: bool = True) -> PipelineRun:
    """fixtures -> ingest -> testgen (both) -> gold/echo stub runs -> eval."""
    run = PipelineRun(Path(root))
    cfg = run.config
    steps = run.steps
    steps["fixtures"] = cli("fixtures", run.root)
    steps["ingest"] = cli("ingest", "-c", cfg)
    steps["testgen_structured"] = cli("testgen", "-c", cfg, "--modality", "structured")
    steps["testgen_unstructured"] = cli("testgen", "-c", cfg, "--modality", "unstructured")
    steps["make_stub"] = cli("make-stub", "--suite", run.out / "suite_structured.jsonl",
                             "--out", run.root / "stubs" / "gold_stub.jsonl", "--corrupt", corrupt)
    steps["run_structured"] = cli("run", "-c", cfg, "--modality", "structured", "--model", "gold_stub")
    steps["run_unstructured"] = cli("run", "-c", cfg, "--modality", "unstructured", "--model", "echo_stub")
    extra = [] if plots else ["--no-plots"]
    steps["eval"] = cli("eval", "-c", cfg, run.out / "runs_structured_gold_stub.jsonl",
                        run.out / "runs_unstructured_echo_stub.jsonl", *extra)
    return run
