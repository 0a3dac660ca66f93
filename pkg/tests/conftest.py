import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jointpo import _kernels

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance results collected for the terminal summary (name -> (passed, detail))
ACCEPTANCE = {}


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request):
    """Index into the (numba, numpy) pairs of ``_kernels.KERNELS``."""
    return 0 if request.param == "numba" else 1


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
