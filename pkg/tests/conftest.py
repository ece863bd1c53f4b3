import numpy as np
import pytest
import torch

from tadiff.schedule import build_schedule


@pytest.fixture(scope="session")
def table():
    return build_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` stores one criterion result for the end-of-run summary."""
    results = request.config.stash[_ACCEPTANCE]

    def record(n: int, ok: bool, detail: str) -> bool:
        results[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
        else:
            terminalreporter.write_line(f"[----] criterion {n:2d}: not run")
