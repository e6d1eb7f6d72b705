import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240814)


def central_diff(f, x, step=1e-5):
    """Elementwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        out[idx] = (f(xp) - f(xm)) / (2.0 * step)
        it.iternext()
    return out
