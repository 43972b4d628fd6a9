"""Figures for evaluation reports.

Rendered with the Agg backend into PNG files next to the text/JSON/TSV
reports. PNG metadata is stripped of the software/version stamp so two runs
produce byte-identical images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ehrllm.evaluator import GRADES, ROUGE_KINDS, EvalReport  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "ehrllm",
}

GRADE_COLORS = {"satisfactory": "#4c956c", "partially_satisfactory": "#f2c14e", "not_satisfactory": "#d1495b"}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_structured(report: EvalReport, path: str | Path) -> Path:
    """Exact-match and code-correctness bars per model, plus stacked grade shares."""
    rows = report.structured
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6), constrained_layout=True)
        x = np.arange(len(rows))
        w = 0.38
        em = [r.exact_match_pct for r in rows]
        cc = [r.code_correct_pct if r.code_correct_pct is not None else 0.0 for r in rows]
        ax1.bar(x - w / 2, em, w, label="exact match", color="#30638e")
        ax1.bar(x + w / 2, cc, w, label="code correct", color="#00798c",
                hatch=["" if r.code_correct_pct is not None else "//" for r in rows])
        ax1.set_xticks(x, [r.model_id for r in rows])
        ax1.set_ylim(0, 100)
        ax1.set_ylabel("% of cases")
        ax1.set_title("Exact match and code correctness")
        ax1.legend(loc="upper left")

        bottom = np.zeros(len(rows))
        for g in GRADES:
            vals = np.array([r.grade_pct[g] if r.grade_pct else 0.0 for r in rows])
            ax2.bar(x, vals, 0.6, bottom=bottom, label=g.replace("_", " "), color=GRADE_COLORS[g])
            bottom += vals
        for i, r in enumerate(rows):
            if r.grade_pct is None:
                ax2.text(i, 50, "n/a", ha="center", va="center")
        ax2.set_xticks(x, [r.model_id for r in rows])
        ax2.set_ylim(0, 100)
        ax2.set_title("Content grade (annotated cases)")
        ax2.legend(loc="upper left", fontsize=7)
        return _save(fig, Path(path))


def plot_unstructured(report: EvalReport, path: str | Path) -> Path:
    """ROUGE precision / recall / F1 per model, one panel each."""
    rows = report.unstructured
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.4), sharey=True, constrained_layout=True)
        x = np.arange(len(ROUGE_KINDS))
        w = 0.8 / max(len(rows), 1)
        for ax, part in zip(axes, ("precision", "recall", "f1")):
            for j, r in enumerate(rows):
                vals = [getattr(r.rouge[k], part) for k in ROUGE_KINDS]
                ax.bar(x + (j - (len(rows) - 1) / 2) * w, vals, w, label=r.model_id)
            ax.set_xticks(x, [f"R{k}" for k in ROUGE_KINDS])
            ax.set_ylim(0, 1)
            ax.set_title(part.capitalize() if part != "f1" else "F1")
        axes[0].set_ylabel("score")
        axes[0].legend(loc="upper left", fontsize=7)
        return _save(fig, Path(path))


def plot_report(report: EvalReport, directory: str | Path, stem: str = "report") -> list[Path]:
    directory = Path(directory)
    out = []
    if report.structured:
        out.append(plot_structured(report, directory / f"{stem}_structured.png"))
    if report.unstructured:
        out.append(plot_unstructured(report, directory / f"{stem}_unstructured.png"))
    return out
