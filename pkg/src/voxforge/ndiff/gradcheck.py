"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, track_kinks

__all__ = ["grad_check", "directional_check", "kink_margin"]


def kink_margin(fn, inputs) -> float:
    """Smallest distance to a non-differentiable point seen while evaluating ``fn``."""
    with track_kinks() as tracker:
        fn(*inputs)
    return tracker.margin


def _prepare(fn, inputs):
    inputs = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite function value")
    out.backward()
    grads = []
    for x in inputs:
        g = np.zeros_like(x.data) if x.grad is None else x.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite analytic gradient")
        grads.append(g)
    return inputs, grads


def _value(fn, inputs):
    v = float(fn(*inputs).data)
    if not np.isfinite(v):
        raise FloatingPointError("non-finite value during finite differencing")
    return v


def _check_eps(eps):
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")


def grad_check(fn, inputs, eps: float = 1e-5, floor: float = 1e-6, max_elements=None, rng=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor. Every element of
    every input is perturbed unless ``max_elements`` is given, in which case
    that many elements are drawn at random (with ``rng``) across all inputs.
    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _check_eps(eps)
    inputs, grads = _prepare(fn, inputs)
    sizes = [x.data.size for x in inputs]
    flat_ids = np.arange(int(np.sum(sizes)))
    if max_elements is not None and max_elements < len(flat_ids):
        rng = rng if rng is not None else np.random.default_rng(0)
        flat_ids = np.sort(rng.choice(len(flat_ids), max_elements, replace=False))
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for fid in flat_ids:
        j = int(np.searchsorted(bounds, fid, side="right") - 1)
        i = int(fid - bounds[j])
        flat = inputs[j].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = _value(fn, inputs)
        flat[i] = orig - eps
        fm = _value(fn, inputs)
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        a = grads[j].reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def directional_check(fn, inputs, eps: float = 1e-5, n_dirs: int = 4, rng=None, floor: float = 1e-6) -> float:
    """Worst relative error of ``grad . v`` against central differences along random unit ``v``.

    Every element of every input moves at once, so one direction exercises the
    whole gradient.
    """
    _check_eps(eps)
    inputs, grads = _prepare(fn, inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    origs = [x.data.copy() for x in inputs]
    worst = 0.0
    for _ in range(n_dirs):
        vs = [rng.normal(size=x.data.shape) for x in inputs]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        a = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        for x, o, v in zip(inputs, origs, vs):
            x.data[...] = o + eps * v
        fp = _value(fn, inputs)
        for x, o, v in zip(inputs, origs, vs):
            x.data[...] = o - eps * v
        fm = _value(fn, inputs)
        for x, o in zip(inputs, origs):
            x.data[...] = o
        num = (fp - fm) / (2 * eps)
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
