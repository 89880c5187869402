"""Central finite-difference checks shared by the model tests."""

import numpy as np

STEP = 1e-4
TOL = 1e-3


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, arr: np.ndarray, idx, step=STEP) -> np.ndarray:
    """d f / d arr[idx] for the listed flat indices; ``f`` reads ``arr`` in place."""
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * step)
    return out


def check_tensors(loss_fn, tensors, max_entries=24, seed=0) -> dict:
    """Compare analytic and numeric gradients of ``loss_fn()`` (a scalar Tensor).

    ``tensors`` maps names to leaf Tensors whose ``.data`` is perturbed.
    Returns ``{name: relative error}`` over a random subset of entries.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
        size = t.data.size
        idx = np.arange(size) if size <= max_entries else rng.choice(size, max_entries, replace=False)
        num = numeric_grad(lambda: float(loss_fn().data), t.data, idx)
        errors[name] = rel_error(analytic.reshape(-1)[idx], num)
    return errors
