"""Echo the acceptance-criteria result lines in the terminal summary.

The acceptance tests print one ``criterion N: PASS/FAIL`` line each as they
run, but pytest's default file-descriptor capture hides stdout for passing
tests; this hook repeats the collected lines where they are always visible.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
