import numpy as np
import pytest

from cepfed.model import Batch, LayerSpec, init_params


def tiny_specs(part3_channels=8):
    """288-parameter net: small enough for full finite-difference sweeps."""
    return (
        LayerSpec("conv1", "conv", (4, 2, 3, 3), "part1"),
        LayerSpec("conv2", "conv", (4, 4, 2, 2), "part2"),
        LayerSpec("conv3", "conv", (part3_channels, 4, 2, 2), "part3"),
        LayerSpec("fc", "dense", (3, part3_channels), "head"),
    )


def tiny_problem(seed, n=5):
    rng = np.random.default_rng(seed)
    specs = tiny_specs()
    model = init_params(specs, rng)
    batch = Batch(rng.normal(size=(n, 2, 6, 6)), rng.integers(0, 3, n))
    return specs, model, batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def specs():
    return tiny_specs()


# -- acceptance report --------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
