import numpy as np
import pytest

from darcyda import fem
from darcyda._core import _kernels_py

# filled by tests/test_acceptance.py; echoed after the test summary so
# the criterion verdicts stay visible in captured runs
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

try:
    from darcyda._core import _kernels as _kernels_compiled
except ImportError:
    _kernels_compiled = None


@pytest.fixture(params=["python", "compiled"])
def kernel_backend(request):
    """Both low-level kernel implementations, same call signature."""
    if request.param == "compiled":
        if _kernels_compiled is None:
            pytest.skip("compiled kernels not built")
        return _kernels_compiled
    return _kernels_py


@pytest.fixture(scope="session")
def mesh8():
    return fem.build_unit_square_mesh(8)


@pytest.fixture(scope="session")
def mesh4():
    return fem.build_unit_square_mesh(4)


@pytest.fixture(scope="session")
def flow_bc():
    """The standard left-to-right pressure drop with no-flow top/bottom."""
    return fem.BoundaryConditions(dirichlet={"left": 1.0, "right": 0.0})


def random_transmissivity(mesh, rng, amplitude=0.5):
    return np.exp(amplitude * rng.standard_normal(mesh.n_nodes))
