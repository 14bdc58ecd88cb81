import numpy as np
import pytest

from cafcn import kernels

ACCEPTANCE_RESULTS = {}


def _backend_params():
    return [pytest.param(mod, id=mod.BACKEND) for mod in kernels.available_backends()]


@pytest.fixture(params=_backend_params())
def backend(request, monkeypatch):
    """Route every tensor primitive through one kernel backend."""
    mod = request.param
    for name in ("conv2d_forward", "conv2d_grad_input", "conv2d_grad_weight",
                 "maxpool2_forward", "maxpool2_backward"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return mod


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
