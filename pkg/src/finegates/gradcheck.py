"""Central finite-difference gradients, used as an independent check on the tape."""

import numpy as np

FD_STEP = 1e-5


def numerical_grad(f, x, step=FD_STEP, indices=None):
    """d f / d x by central differences; ``f`` maps the array ``x`` (mutated in place) to a float.

    With ``indices`` only those flat coordinates are probed; the rest of the
    result is left as NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
