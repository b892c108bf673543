import numpy as np
import pytest

from rcgrpo.env import Geometry, make_task
from rcgrpo.flow import AttnFlow


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_geometry():
    # D = 8: four tokens of width two
    return Geometry(n_tokens=4, token_dim=2, n_txt=3, n_layers=2)


@pytest.fixture(scope="session")
def small_task(small_geometry):
    return make_task(3, small_geometry, {"kind": "rect", "height": 1, "width": 1, "row": 0, "col": 1})


@pytest.fixture(scope="session")
def small_attn(small_geometry):
    g = small_geometry
    return AttnFlow.init(g.n_tokens, g.token_dim, g.d_txt, g.n_layers, rng=1,
                         attn_scale=1.0, out_scale=0.5)


@pytest.fixture(scope="session")
def default_task():
    return make_task(1)


@pytest.fixture(scope="session")
def default_attn():
    g = Geometry()
    return AttnFlow.init(g.n_tokens, g.token_dim, g.d_txt, g.n_layers, rng=0)


def central_difference(f, x, step=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
