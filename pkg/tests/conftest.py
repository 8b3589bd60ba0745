import numpy as np
import pytest
import torch

from neuroseg.experiments import gradcheck_inputs


def tie_free_probs(seed, shape=(1, 1, 6, 6), lo=0.05, hi=0.95):
    return gradcheck_inputs(seed, shape, lo, hi)[0]


def random_mask(seed, shape=(1, 1, 6, 6), p=0.4):
    rng = np.random.default_rng(seed + 10_000)
    return torch.tensor((rng.random(shape) < p).astype(np.float64))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
