import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slowfast_nse.spectral import SpectralSpace, random_fields

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def space16():
    return SpectralSpace(16)


@pytest.fixture(scope="session")
def space32():
    return SpectralSpace(32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fields(space, seed, n=None, norm=1.0, decay=1.0):
    return random_fields(space, np.random.default_rng(seed), n, decay=decay, norm=norm)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
