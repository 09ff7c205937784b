import numpy as np
import pytest

from lfposterior import scenegen
from lfposterior.lightfield import LightField


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return scenegen.SceneConfig(height=24, width=24, views=5)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return scenegen.generate_dataset(small_config, 3, seed=5)


@pytest.fixture
def random_lightfield(rng):
    def make(u=5, c=3, h=16, w=16):
        return LightField(rng.uniform(0.0, 1.0, (u, u, c, h, w)).astype(np.float32))

    return make


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def report(label: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
