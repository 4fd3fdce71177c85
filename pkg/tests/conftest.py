import numpy as np
import pytest


def fd_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute deviation, scaled by the reference magnitude."""
    denom = max(float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b))) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)
