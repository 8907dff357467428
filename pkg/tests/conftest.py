import time
from contextlib import contextmanager

import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """Context manager that times an acceptance check and records PASS/FAIL."""
    lines = request.config.stash[_KEY]

    @contextmanager
    def check(number: int, title: str, limit_s: float | None = None):
        t0 = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - t0
            assert limit_s is None or elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
            ok = True
        finally:
            elapsed = time.perf_counter() - t0
            line = f"{'PASS' if ok else 'FAIL'}  C{number}  {title}  ({elapsed:.2f}s)"
            lines.append(line)
            print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
