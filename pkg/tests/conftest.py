"""Prints one line per acceptance criterion after the run."""

CRITERION_PREFIX = "test_acceptance.py::test_criterion_"


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if CRITERION_PREFIX not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split(CRITERION_PREFIX, 1)[1]
            num, _, title = name.partition("_")
            detail = dict(rep.user_properties).get("detail", "")
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((int(num), f"criterion {int(num):2d} {status}  {title.replace('_', ' ')}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
