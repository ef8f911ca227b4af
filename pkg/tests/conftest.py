import numpy as np
import pytest

from scripmon.core import RandomStream

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class ScriptedStream(RandomStream):
    """Stream that replays a fixed list of uniforms (for hand traces)."""

    def __init__(self, values):
        super().__init__(0)
        self.values = list(values)

    def random(self) -> float:
        if not self.values:
            raise AssertionError("scripted stream exhausted")
        self.consumed += 1
        return float(self.values.pop(0))


def pick(index: int, size: int) -> float:
    """Uniform that makes ``below(size)`` return ``index``."""
    return (index + 0.5) / size


@pytest.fixture
def scripted():
    return ScriptedStream


@pytest.fixture
def acceptance():
    """Record one acceptance verdict; all verdicts are printed at the end of the run."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def small_ledger(params, holdings):
    from scripmon.core import TokenLedger
    return TokenLedger(params.unit, params.cap_units, np.asarray(holdings, dtype=np.int64) * params.unit)
