import datetime as dt

import pytest

from ehrllm import fixtures
from ehrllm.query import ExecutionContext
from ehrllm.tabular import (
    CohortConfig,
    join_cohort,
    load_csv,
    project_columns,
    sample_cohort,
    synthesize_dob,
)
from ehrllm.testgen import default_note

REFERENCE_DATE = dt.date(2024, 1, 1)


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    return fixtures.write_fixture_dataset(tmp_path_factory.mktemp("tables"), n_patients=500, seed=0)


@pytest.fixture(scope="session")
def source_tables(fixture_paths):
    return {name: load_csv(p, kinds=fixtures.STRING_KINDS) for name, p in fixture_paths.items()}


@pytest.fixture(scope="session")
def analysis_table(source_tables):
    cfg = CohortConfig()
    cohort = synthesize_dob(sample_cohort(source_tables["patients"], cfg), cfg)
    merged = join_cohort(cohort, source_tables["prescriptions"], source_tables["diagnoses"], source_tables["d_icd"])
    return project_columns(merged, fixtures.ANALYSIS_COLUMNS)


@pytest.fixture(scope="session")
def ctx():
    return ExecutionContext(REFERENCE_DATE)


@pytest.fixture(scope="session")
def note():
    return default_note()


# -- acceptance report ----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if failed or (report.when == "call" and number not in _CRITERIA):
        _CRITERIA[number] = ("FAIL" if failed else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
