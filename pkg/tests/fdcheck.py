"""Central finite-difference oracle, independent of the autodiff engine.

Everything here works on raw float64 numpy arrays; the function under test
is only ever *evaluated*, never differentiated.
"""

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f(x) / dx by central differences; ``f`` maps an array to a float."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest numeric gradient magnitude."""
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(np.asarray(analytic) - numeric).max()) / scale
