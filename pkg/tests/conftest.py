"""Shared pytest plumbing.

Collects acceptance-criterion verdicts recorded by test_acceptance.py and
prints one line per criterion after the normal test summary, so a run's
transcript shows the benchmark verdicts at a glance.
"""

_CRITERIA = {}


def record_criterion(number, name, verdict, detail=""):
    """verdict: True/False or one of the strings PASS / FAIL / SKIP."""
    if isinstance(verdict, bool):
        verdict = "PASS" if verdict else "FAIL"
    _CRITERIA[number] = {"name": name, "verdict": verdict, "detail": detail}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        line = f"criterion {number:2d} [{entry['verdict']:4s}] {entry['name']}"
        if entry["detail"]:
            line += f" -- {entry['detail']}"
        terminalreporter.write_line(line)
