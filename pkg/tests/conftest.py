import sys
import time
from pathlib import Path

import pytest

from smoker.broker import BackgroundBroker, Broker
from smoker.nonce import TEST_SEED, NonceService
from smoker.schnorr import GroupParams

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"
SUITE_BUDGET_SECS = 120.0

_results: list[tuple[int, str, bool, str]] = []
_start = time.perf_counter()


@pytest.fixture
def small_group():
    return GroupParams(p=23, q=11, g=2)


@pytest.fixture
def broker():
    with BackgroundBroker(Broker(NonceService(TEST_SEED))) as running:
        yield running


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the summary table."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        _results.append((number, name, ok, detail))
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    elapsed = time.perf_counter() - _start
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, name, ok, detail in sorted(_results):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}" + (f"  ({detail})" if detail else ""))
    ok = elapsed < SUITE_BUDGET_SECS
    tr.write_line(
        f"[{'PASS' if ok else 'FAIL'}] 10. full suite under {SUITE_BUDGET_SECS:.0f} s  ({elapsed:.1f} s)"
    )


def pytest_sessionfinish(session, exitstatus):
    if _results and time.perf_counter() - _start >= SUITE_BUDGET_SECS:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED
