import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Record one acceptance criterion outcome for the terminal summary."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:g}s"
    except BaseException as exc:
        ACCEPTANCE[number] = ("FAIL", title, f"{type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''}")
        raise
    ACCEPTANCE[number] = ("PASS", title, f"{time.perf_counter() - start:.2f}s")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} ({detail})")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
