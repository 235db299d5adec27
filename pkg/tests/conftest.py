import numpy as np
import pytest
import torch
from hypothesis import settings

from adunet.phantom import PhantomConfig, generate_case

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cfg():
    return PhantomConfig()


@pytest.fixture(scope="session")
def healthy_case(cfg):
    return generate_case(7, cfg, diseased=False)


@pytest.fixture(scope="session")
def diseased_case(cfg):
    return generate_case(3, cfg, diseased=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for a criterion; prints it and keeps it for the summary."""

    def record(passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  {request.node.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
