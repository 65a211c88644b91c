"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn, inputs, h=1e-5, n_samples=5, rng=None, floor=1e-8):
    """Largest relative error between backprop and central differences.

    ``fn(*inputs)`` must return a Tensor. Non-scalar outputs are reduced with
    a fixed random projection so every output element contributes. For each
    input requiring grad, ``n_samples`` random elements are perturbed by
    ``+-h``. Inputs should be 64-bit.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)

    def scalar():
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    out.backward(proj)
    worst = 0.0
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        analytic = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(analytic[i]), numeric, floor))
    return worst
