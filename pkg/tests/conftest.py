"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

_CRITERION = re.compile(r"test_c(\d{2})_([a-z0-9_]+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for category, word in (("passed", "PASS"), ("failed", "FAIL"),
                           ("error", "FAIL")):
        for report in terminalreporter.stats.get(category, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            found = _CRITERION.search(nodeid)
            if not found:
                continue
            num = int(found.group(1))
            label = found.group(2).replace("_", " ")
            if word == "FAIL" or num not in verdicts:
                verdicts[num] = (label, word)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(verdicts):
        label, word = verdicts[num]
        terminalreporter.write_line(f"criterion {num:02d} ({label}): {word}")
