"""Shared test plumbing.

The acceptance tests append one scoreboard line each to their module-level
RESULTS list; printing happens here, after capture is released, so the lines
show up no matter which capture mode the run uses.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="-")
    for line in results:
        terminalreporter.write_line(line)
