import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
if str(FIXTURES) not in sys.path:
    sys.path.insert(0, str(FIXTURES))

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# criterion lines collected by test_acceptance.py, echoed in the terminal summary
CRITERION_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    def report(number: int, passed: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERION_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
