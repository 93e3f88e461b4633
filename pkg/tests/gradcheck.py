"""Central-difference gradient checks against the autodiff core."""

import numpy as np

from meshbench import adcore as ad

EPS = 1e-6
RTOL = 1e-4


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr, entries=None, eps=EPS):
    """d f / d arr at ``entries`` (flat indices, all by default); ``arr`` is perturbed in place."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size) if entries is None else np.asarray(entries)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return out


def check(build, tensors, max_entries=None, rng=None):
    """Worst per-tensor relative error between autodiff and central differences.

    ``build()`` maps the current tensor values to a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    build().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    def f():
        with ad.no_grad():
            return float(build().data)

    worst = 0.0
    for t, g in zip(tensors, analytic):
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            entries = rng.choice(t.data.size, max_entries, replace=False)
        num = numeric_grad(f, t.data, entries)
        ana = g.reshape(-1) if entries is None else g.reshape(-1)[entries]
        worst = max(worst, rel_error(ana, num))
    return worst

