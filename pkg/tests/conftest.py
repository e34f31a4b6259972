import re
from collections import OrderedDict

_CRITERION_TITLES = {
    1: "mask/transfer exactness",
    2: "MPT oracle equivalence",
    3: "loss oracles and gradients",
    4: "structural invariants",
    5: "metrics oracle",
    6: "end-to-end trend reproduction",
    7: "end-to-end determinism",
}

_outcomes = OrderedDict()


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match or report.when != "call":
        return
    num = int(match.group(1))
    passed = report.outcome == "passed"
    _outcomes[num] = _outcomes.get(num, True) and passed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        title = _CRITERION_TITLES.get(num, "")
        verdict = "PASS" if _outcomes[num] else "FAIL"
        terminalreporter.write_line(f"CRITERION {num} ({title}): {verdict}")
