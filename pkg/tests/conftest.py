"""Suite-level reporting: one summary line per numbered acceptance check."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            found = _CRITERION.search(getattr(report, "nodeid", ""))
            if found is None:
                continue
            number = int(found.group(1))
            verdicts[number] = verdicts.get(number, True) and status == "passed"
    if not verdicts:
        return
    terminalreporter.write_line("")
    for number in sorted(verdicts):
        verdict = "pass" if verdicts[number] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}")
