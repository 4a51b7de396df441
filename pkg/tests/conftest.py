import numpy as np
import pytest

from tdmfew import numeric as nm


@pytest.fixture(autouse=True)
def finite_checks():
    """Assert finite values after every op in unit tests."""
    nm.set_finite_checks(True)
    yield
    nm.set_finite_checks(False)


def fd_scalar_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array.

    ``f`` maps a plain ndarray to a float and must rebuild its computation
    on every call; this is the independent oracle for gradient tests.
    """
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max() / denom)
