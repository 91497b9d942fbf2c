import numpy as np
import pytest
import torch

from propnet.data import PhantomConfig
from propnet.model import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """Small network config that keeps unit tests fast."""
    return NetworkConfig(input_size=64, base_channels=8, blocks=(1, 1, 1, 1))


@pytest.fixture
def small_phantom():
    return PhantomConfig(shape=(16, 48, 48), spacing=(5.0, 1.2, 1.2), lumen_radius_range=(4.0, 5.0),
                         wall_thickness_range=(3.0, 4.0), tumor_slices_range=(6, 9), seed=3)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield


# -- acceptance verdicts -----------------------------------------------------

ACCEPTANCE_CRITERIA = 10
_verdicts: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """record(n, ok, detail) stores one PASS/FAIL line for criterion n and
    returns ok, so tests can ``assert verdict(...)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _verdicts[n] = line
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        terminalreporter.write_line(_verdicts.get(n, f"criterion {n:2d}: NOT RUN"))
