import numpy as np
import pytest


def numeric_grad(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x0, elementwise.

    Independent oracle used by gradient-check tests; must stay free of any
    ndgrad machinery.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-4):
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric)
    bound = tol * (1.0 + np.maximum(np.abs(analytic), np.abs(numeric)))
    worst = float((err - bound).max())
    assert (err <= bound).all(), f"gradient mismatch, worst excess {worst:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
