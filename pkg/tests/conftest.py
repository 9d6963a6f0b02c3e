import numpy as np
import pytest

from edgecnn.data import synthesize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthesize(classes=5, per_class=6, size=16, seed=3)


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(number, title, ok, detail=""):
        ACCEPTANCE.append((number, title, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}" + (f"  ({detail})" if detail else ""))
