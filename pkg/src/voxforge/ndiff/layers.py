"""Parameter initialisers and layer helpers on top of :class:`ParamStore`."""
from __future__ import annotations

import numpy as np

from . import tensor as T

__all__ = ["init_linear", "init_conv", "linear", "conv"]


def init_linear(store, name, n_in, n_out, rng, zero=False, gain=2.0):
    w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, np.sqrt(gain / n_in), (n_in, n_out))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(n_out))


def init_conv(store, name, c_in, c_out, rng, k=3, zero=False):
    shape = (k, k, c_in, c_out)
    w = np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / (k * k * c_in)), shape)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(c_out))


def linear(store, name, x):
    return T.affine(x, store[f"{name}.w"], store[f"{name}.b"])


def conv(store, name, x):
    return T.conv2d(x, store[f"{name}.w"], store[f"{name}.b"])
