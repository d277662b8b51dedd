import numpy as np
import pytest
import torch
from PIL import Image

torch.set_num_threads(1)


def luma(arr):
    """8-bit luma (as ``load_image`` would produce) in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = np.asarray(Image.fromarray(arr[..., :3]).convert("L"))
    return arr.astype(np.float64) / 255.0


@pytest.fixture(autouse=True)
def _seed_torch():
    # tests draw from torch's global generator; reseed so results do not depend on test order
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def natural_images():
    from skimage import data

    names = ["camera", "astronaut", "coffee", "chelsea", "coins", "moon", "clock", "page", "rocket", "grass"]
    return {n: luma(getattr(data, n)()) for n in names}


# -- acceptance reporting ----------------------------------------------------

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line, ``PASS``/``FAIL``, then assert it."""

    def check(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
