import numpy as np
import pytest

from diffunlearn import denoiser as dn
from diffunlearn import diffusion as df
from diffunlearn.datasets import ToyDatasetSpec, generate_dataset, split_forget
from diffunlearn.mathcore import Rng


@pytest.fixture
def small_schedule():
    return df.linear_schedule(20, 1e-3, 0.2)


@pytest.fixture
def small_params(small_schedule):
    return dn.init_params(Rng(7), 2, 3, small_schedule.T, hidden=(8, 8), time_dim=4, class_dim=3)


@pytest.fixture
def small_split():
    data = generate_dataset(ToyDatasetSpec(num_classes=3, n_per_class=60, seed=3))
    return split_forget(data, [1], 0.5, seed=3)


def assert_params_equal(a, b):
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
