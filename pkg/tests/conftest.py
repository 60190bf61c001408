from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = report.user_properties and dict(report.user_properties).get("criterion")
    if crit:
        n, title = crit
        _CRITERIA[n] = (title, "PASS" if report.outcome == "passed" else "FAIL")


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {outcome}: {title}")


@pytest.fixture(scope="session")
def suite():
    from cedkit.simulator import load_suite

    return load_suite("default")


@pytest.fixture(scope="session")
def default_build(tmp_path_factory, suite):
    """The default 2,000-trace five-minute build, shared by several tests."""
    from cedkit.dataset import DatasetManifest, build, load_dataset

    out = tmp_path_factory.mktemp("default_build")
    manifest = DatasetManifest(name="default", split="train", count=2000, seed_base=0)
    result = build(manifest, out, suite)
    return result, load_dataset(out)
