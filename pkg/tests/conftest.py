import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from incpvae import diffcore as dc

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
os.environ.setdefault("INCPVAE_DATA_DIR", str(REPO / "data"))


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array, in float64."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-2, np.maximum(np.abs(a), np.abs(b)))))


def check_grad(build, arrays, h=1e-6):
    """Max relative error between backward() and central differences for ``build(*tensors)``."""
    with dc.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        ts = [dc.tensor(a, requires_grad=True) for a in arrays]
        analytic = dc.backward(build(*ts), ts)

        def f(*xs):
            return build(*[dc.tensor(x) for x in xs]).item()

        numeric = numeric_grad(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
