from collections import defaultdict

import pytest

from diwse.qcore import RngStream

ACCEPTANCE_TITLES = {
    1: "honest CHSH statistic (exact and sampled)",
    2: "correctness: abort fraction and X_I = Xhat_I",
    3: "one-qubit sequential-source attack at n=200",
    4: "rate anchors and convergence of lambda",
    5: "analytic gradient vs central differences",
    6: "exact tails never exceed their bounds",
    7: "classical receivers respect the tradeoff function",
    8: "position verification completeness and cheat decay",
    9: "CLI determinism",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_runtest_logreport(report):
    crit = getattr(report, "acceptance_criterion", None)
    if crit is None:
        return
    if report.skipped:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _outcomes[crit].append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep.acceptance_criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_TITLES):
        results = _outcomes.get(crit)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        tr.write_line(f"criterion {crit}: {status:7s} {ACCEPTANCE_TITLES[crit]} ({sum(results or [])}/{len(results or [])} tests)")


@pytest.fixture
def rng():
    return RngStream(20240611)
