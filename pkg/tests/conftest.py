import pytest
import torch

from latentrx import numkit

torch.set_num_threads(1)


@pytest.fixture
def f64():
    with numkit.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _reset_precision():
    numkit.set_precision("float32")
    yield
    numkit.set_precision("float32")


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n)`` are gathered into one pass/fail line
# per criterion at the end of the session; ``record_property("detail", ...)``
# attaches the measured numbers to that line.

_criteria: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _criteria.setdefault(marker.args[0], []).append((item.name, report.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        runs = _criteria[n]
        ok = all(passed for _, passed, _ in runs)
        detail = " | ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
