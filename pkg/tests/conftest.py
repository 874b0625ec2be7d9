import os
from pathlib import Path

import pytest

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture(scope="session")
def mnist_dir():
    """Directory holding the four MNIST IDX files, from $LATKIT_MNIST or /root/data/mnist."""
    path = Path(os.environ.get("LATKIT_MNIST", "/root/data/mnist"))
    missing = [name for name in MNIST_FILES if not (path / name).exists()]
    if missing:
        pytest.skip(f"MNIST not found in {path} (missing {', '.join(missing)})")
    return path


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, {"title": title, "status": "PASS", "notes": []})
    if report.when == "call" or report.failed or report.skipped:
        known_failure = report.skipped and hasattr(report, "wasxfail")
        if report.failed or known_failure:
            # a known failure still fails the criterion; xfail only keeps the run green
            entry["status"] = "FAIL"
            if known_failure:
                entry["notes"].append(f"known failure: {report.wasxfail}")
        elif report.skipped and entry["status"] == "PASS":
            entry["status"] = "SKIP"
        if report.when == "call":
            entry["notes"] += [f"{k} = {v}" for k, v in report.user_properties]
    if report.when in ("setup", "call"):
        # setup time counts too: shared training runs live in session fixtures
        entry["duration"] = entry.get("duration", 0.0) + report.duration


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        took = f" ({entry['duration']:.1f} s)" if "duration" in entry else ""
        tr.write_line(f"criterion {number}: {entry['status']}  {entry['title']}{took}")
        for note in entry["notes"]:
            tr.write_line(f"    {note}")
