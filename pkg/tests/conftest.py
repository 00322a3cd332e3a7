import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def smooth_field(seed: int, n: int = 64, max_abs: float = 2.0, sigma: float = 6.0, dtype=torch.float32):
    """White noise smoothed by a Gaussian of ``sigma`` cells, rescaled so max |u| == max_abs."""
    r = np.random.default_rng(seed)
    c = np.stack([gaussian_filter(r.normal(size=(n, n)), sigma, mode="reflect") for _ in range(2)])
    return torch.tensor(c * max_abs / np.abs(c).max(), dtype=dtype)


def ramp(n: int = 16, axis: int = 0, dtype=torch.float64):
    idx = torch.arange(n, dtype=dtype)
    return idx[:, None].expand(n, n).clone() if axis == 0 else idx[None, :].expand(n, n).clone()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
