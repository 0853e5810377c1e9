import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance_report():
    """Callable that records one summary line per acceptance criterion."""

    def report(number: int, passed: bool, summary: str, seconds: float, budget: float) -> str:
        ok = passed and seconds < budget
        line = (f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {summary}  "
                f"[{seconds:.2f} s, budget {budget:g} s]")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
