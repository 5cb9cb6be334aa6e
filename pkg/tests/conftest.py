import numpy as np
import pytest
import torch

torch.set_default_dtype(torch.float64)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.acceptance = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config.acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config.acceptance):
        ok, detail = config.acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
