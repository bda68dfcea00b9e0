"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from arflow import autodiff as ad
from arflow.autodiff import Tensor

H = 1e-6
RTOL = 1e-4


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    # floor keeps round-off on all-zero gradients from reading as a large relative error
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-7)
    return np.linalg.norm(a - b) / den


def numeric_grad(f, arr, idx=None, h=H):
    """Central differences of scalar ``f()`` w.r.t. entries ``idx`` of ``arr`` (all by default)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check_op(op, *arrays, seed=0):
    """Compare analytic and numeric gradients of ``sum(op(*tensors) * R)`` for every input."""
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = op(*ts)
        proj = rng.standard_normal(out.shape)

        def scalar():
            with ad.no_grad():
                return float((op(*ts).data * proj).sum())

        (out * Tensor(proj)).sum().backward()
        errs = []
        for t in ts:
            num = numeric_grad(scalar, t.data).reshape(t.shape)
            ana = np.zeros(t.shape) if t.grad is None else t.grad
            errs.append(rel_err(ana, num))
    return max(errs)


def check_params(loss_fn, store, per_tensor=6, seed=0, skip=()):
    """Check a random subset of entries of every parameter in ``store`` (float64) not named in ``skip``."""
    rng = np.random.default_rng(seed)
    store.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in store.items():
        if name in skip:
            continue
        n = p.data.size
        idx = rng.choice(n, size=min(per_tensor, n), replace=False)

        def scalar():
            with ad.no_grad():
                return float(loss_fn().data)

        num = numeric_grad(scalar, p.data, idx)
        ana = store.grad(name).reshape(-1)[idx]
        worst = max(worst, rel_err(ana, num))
    return worst
