import numpy as np
import pytest

from randq import autodiff as ad


def finite_diff_grad(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar fn wrt a flat copy of x.

    Evaluated under float64 so the difference quotients are not swamped by
    float32 rounding of the loss value."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    with ad.working_dtype(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(x)
            flat[i] = orig - h
            fm = fn(x)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-2,
                      atol: float = 1e-4):
    denom = np.maximum(np.abs(numeric), atol / rtol)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() <= rtol, f"max relative gradient error {rel.max():.4g}"


def well_separated(gen: np.random.Generator, shape, *, min_gap: float = 0.05) -> np.ndarray:
    """Random tensor whose absolute values are pairwise separated, keeping
    max/top-k selections away from ties."""
    n = int(np.prod(shape))
    base = np.arange(1, n + 1, dtype=np.float64)
    # additive jitter < min_gap keeps every pair of magnitudes at least
    # 0.7 * min_gap apart, far beyond finite-difference step sizes
    vals = (base + 0.3 * gen.random(n)) * min_gap + 0.2
    signs = gen.choice([-1.0, 1.0], size=n)
    gen.shuffle(vals)
    return (vals * signs).reshape(shape).astype(np.float32)


@pytest.fixture
def gen():
    return np.random.Generator(np.random.Philox(key=1234))
