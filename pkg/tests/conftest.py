"""Shared pytest configuration.

Tests marked @pytest.mark.acceptance(num=N, name="...") are collected into a
terminal summary section with one PASS/FAIL line per criterion, so the
acceptance gate is readable at a glance. A criterion spanning several tests
passes only if all of them pass.
"""

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(num, name): marks a test as part of acceptance "
        "criterion <num>")
    config._acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    num = marker.kwargs["num"]
    name = marker.kwargs["name"]
    store = item.config._acceptance_results
    prior_ok, _ = store.get(num, (True, name))
    if report.when == "call":
        store[num] = (prior_ok and report.passed, name)
    elif report.outcome in ("failed", "skipped"):
        store[num] = (False, name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        passed, name = results[num]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} ({name}): {verdict}")
