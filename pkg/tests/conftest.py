import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = []


class AcceptanceReport:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.start = time.perf_counter()
        self.checks = []

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))

    def finish(self, budget_s):
        elapsed = time.perf_counter() - self.start
        self.check(f"runtime < {budget_s:g}s", elapsed < budget_s, f"{elapsed:.1f}s")
        ok = all(c[1] for c in self.checks)
        details = "; ".join(f"{n}: {'ok' if good else 'FAILED'}{' (' + d + ')' if d else ''}"
                            for n, good, d in self.checks)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number} {self.title} | {details}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        failed = [n for n, good, _ in self.checks if not good]
        assert not failed, f"criterion {self.number} failed checks: {failed}"


@pytest.fixture
def acceptance():
    return AcceptanceReport


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
