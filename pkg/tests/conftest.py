"""Prints one PASS/FAIL line per acceptance criterion after the run."""

CRITERIA = {
    "test_c1": "C1 exact-unlearning equivalence",
    "test_c2": "C2 gradient fidelity",
    "test_c3": "C3 partition invariants",
    "test_c4": "C4 partition benefit over random sharding",
    "test_c5": "C5 deletion monotonicity",
    "test_c6": "C6 efficiency ratio",
    "test_c7": "C7 metric oracle equivalence",
    "test_c8": "C8 checkpoint persistence",
}

_outcomes = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    for prefix, title in CRITERIA.items():
        if name.startswith(prefix):
            if report.when == "call":
                _outcomes[title] = report.outcome
            elif report.when == "setup" and report.outcome != "passed":
                _outcomes[title] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for title in CRITERIA.values():
        outcome = _outcomes.get(title)
        if outcome is None:
            continue
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"ACCEPTANCE {title}: {status}")
