import numpy as np
import pytest

from multigrain.autodiff import Tensor


def numeric_grad(fn, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar fn() w.r.t. t's entries.

    Perturbs t.data in place; fn must recompute the forward pass from the
    current parameter values on every call.
    """
    flat = t.data.reshape(-1)
    assert flat.base is not None or flat is t.data, "needs a contiguous view"
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(t.data.shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-4, atol: float = 1e-8, label: str = ""):
    analytic = np.asarray(analytic, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    tol = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    if not np.all(diff <= tol):
        worst = float((diff - tol).max())
        raise AssertionError(
            f"gradient mismatch{' for ' + label if label else ''}: "
            f"worst excess {worst:.3e}, max rel "
            f"{float((diff / (np.abs(numeric) + 1e-12)).max()):.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
