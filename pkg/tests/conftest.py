"""Shared fixtures and the per-criterion acceptance summary."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient correctness",
    2: "pose recovery",
    3: "zero-noise fixed points",
    4: "covariance initialization invariants",
    5: "SH correctness",
    6: "renderer oracle equivalence",
    7: "Otsu oracle equivalence",
    8: "matching oracle equivalence",
    9: "ablation directions",
    10: "end-to-end quality",
    11: "determinism",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = int(mark.args[0])
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _outcomes.setdefault(n, []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {CRITERIA[n]}")
