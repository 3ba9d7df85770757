import numpy as np
import pytest
from hypothesis import settings

from ulmtrack.config import default_config
from ulmtrack.scene import ArraySpec

settings.register_profile("ulmtrack", max_examples=40, deadline=None)
settings.load_profile("ulmtrack")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_array():
    # 8 x 8 elements at the real pitch keeps channel simulations quick
    return ArraySpec(8, 8, 2.4, 2.65)


@pytest.fixture
def short_config():
    return default_config(5, **{"acquisition.duration": 3.0})


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL summary line for an acceptance criterion."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
