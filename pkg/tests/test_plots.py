from ehrllm.evaluator import AnnotationRecord, RunRecord, aggregate_report
from ehrllm.plots import plot_report

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _report():
    records = [RunRecord(f"S{i:03d}", "structured", m, "q", "5" if i % 2 else "4", "5")
               for m in ("a", "b") for i in range(1, 5)]
    records += [RunRecord("U001", "unstructured", "a", "q", "the cat", "the cat sat")]
    notes = [AnnotationRecord("S001", "a", "x", code_correct=True, content_grade="satisfactory")]
    return aggregate_report(records, notes)


def test_plot_report_writes_pngs(tmp_path):
    paths = plot_report(_report(), tmp_path, "r")
    assert [p.name for p in paths] == ["r_structured.png", "r_unstructured.png"]
    for p in paths:
        assert p.read_bytes()[:8] == PNG_MAGIC


def test_plots_are_byte_identical(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = plot_report(_report(), tmp_path / "a")
    b = plot_report(_report(), tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert b"Matplotlib" not in a[0].read_bytes()


def test_only_present_modalities_plotted(tmp_path):
    report = aggregate_report([RunRecord("U001", "unstructured", "a", "q", "x", "x")])
    assert [p.name for p in plot_report(report, tmp_path)] == ["report_unstructured.png"]
