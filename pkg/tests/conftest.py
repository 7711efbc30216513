import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from helpers import ACCEPTANCE  # noqa: E402

ACCEPTANCE_TOTAL = 10


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(getattr(r, "nodeid", ""))
              for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (not evaluated: test errored or was deselected)")
