import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from sysidlab import data


TINY = data.DatasetSpec(n_groups=2, group_size=2, train_len=12, test_len=16, seed=5)


@pytest.fixture(scope="session")
def tiny_lti2():
    return data.build_dataset("lti2_target", TINY)


@pytest.fixture(scope="session")
def tiny_lti3():
    return data.build_dataset("lti3_source", TINY)


# --- acceptance reporting ----------------------------------------------------
#
# Tests marked ``@pytest.mark.criterion(n, "text")`` are gathered here; the
# terminal summary prints one PASS/FAIL line per criterion (a criterion with
# several tests passes only if all of them pass).

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    entry = _CRITERIA.setdefault(
        number, {"text": text, "passed": 0, "failed": [], "skipped": 0, "details": []}
    )
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            entry["passed"] += 1
        elif report.skipped:
            entry["skipped"] += 1
        else:
            entry["failed"].append(item.name)
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        if e["failed"]:
            status = "FAIL"
        elif e["passed"] and not e["skipped"]:
            status = "PASS"
        else:
            status = "SKIP"
        line = f"[{status}] criterion {number}: {e['text']}"
        if e["failed"]:
            line += f"  (failing: {', '.join(e['failed'])})"
        tr.write_line(line)
        for detail in e["details"]:
            tr.write_line(f"    {detail}")
