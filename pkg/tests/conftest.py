import numpy as np
import pytest
import torch

from advkd.diffusion import NoiseSchedule, make_linear_schedule


@pytest.fixture
def schedule():
    return make_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def flat_schedule():
    """Degenerate schedule with every beta = 0."""
    return NoiseSchedule.from_betas(np.zeros(3))


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


# one PASS/FAIL line per acceptance criterion in the terminal summary
_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    n = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    if report.failed:
        _criteria[n] = "FAIL"
    elif report.when == "call" and _criteria.get(n) != "FAIL":
        _criteria[n] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {_criteria[n]}")
