import numpy as np
import pytest

from msgad.harness.reference import ReferenceSaddle, make_reference
from msgad.model import TWOD_MINIMA, TwoDimOUModel, make_model


class FrozenDriftModel(TwoDimOUModel):
    """2D example whose slow drift is the averaged force itself.

    ``f`` ignores the fast state, so every driver must reproduce plain GAD on
    ``exact_F`` step for step.
    """

    name = "frozen-drift"

    def f(self, x, y):
        y = np.asarray(y)
        return np.broadcast_to(self.exact_F(x), y.shape).copy()

    def g(self, x, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def dxf(self, x, y):
        y = np.asarray(y)
        return np.broadcast_to(self.exact_DF(x), y.shape[:-1] + (2, 2))

    def dxf_matvec(self, x, y, v):
        return np.broadcast_to(self.exact_DF(x) @ v, np.asarray(y).shape)

    def dxf_rmatvec(self, x, y, w):
        return np.broadcast_to(self.exact_DF(x).T @ w, np.asarray(y).shape)

    def dxf_mean_matvec(self, x, ys, v):
        return self.exact_DF(x) @ v

    def dxf_mean_rmatvec(self, x, ys, w):
        return self.exact_DF(x).T @ w


@pytest.fixture
def twod():
    return make_model("twod-ou")


@pytest.fixture
def frozen():
    return FrozenDriftModel()


@pytest.fixture(scope="session")
def ac_model():
    return make_model("allen-cahn")


@pytest.fixture(scope="session")
def ac_reference(tmp_path_factory):
    model = make_model("allen-cahn")
    ref = make_reference(model, v0=np.ones(model.N))
    path = ref.save(tmp_path_factory.mktemp("acref"))
    return ReferenceSaddle.load(path)


@pytest.fixture(scope="session")
def s1_reference():
    model = make_model("twod-ou")
    return make_reference(model, TWOD_MINIMA["m1"], np.array([0.0, 1.0]))


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])


@pytest.fixture
def criterion(request, capsys):
    """Record and print the verdict line of one acceptance criterion."""

    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report
