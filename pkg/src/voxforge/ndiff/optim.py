"""Parameter storage, Adam with global-norm clipping, and NDF1 checkpoints."""
from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

__all__ = ["ParamStore", "adam_step", "clip_by_global_norm", "save_checkpoint", "load_checkpoint"]

NDF_MAGIC = b"NDF1"
NDF_VERSION = 1


class ParamStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params: dict = {}
        self.adam_m: dict = {}
        self.adam_v: dict = {}
        self.step_count = 0

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}

    def n_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n in self.names():
            new.add(n, self.params[n].data.copy())
            new.adam_m[n] = self.adam_m[n].copy()
            new.adam_v[n] = self.adam_v[n].copy()
        new.step_count = self.step_count
        return new


def clip_by_global_norm(grads: dict, clip_norm: float):
    names = sorted(grads)
    norm = float(np.sqrt(np.sum([np.sum(grads[n] * grads[n]) for n in names]))) if names else 0.0
    if clip_norm is not None and np.isfinite(clip_norm) and norm > clip_norm:
        s = clip_norm / norm
        return {n: grads[n] * s for n in names}, norm
    return {n: grads[n] for n in names}, norm


def adam_step(store: ParamStore, grads: dict | None = None, lr: float = 5e-4, clip_norm: float | None = 0.5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Clip gradients to ``clip_norm`` (global L2) then apply one Adam update in place."""
    if grads is None:
        grads = store.grads()
    for n in store.names():
        g = grads.get(n)
        if g is None:
            continue
        if np.shape(g) != store.params[n].shape:
            raise ValueError(f"gradient for {n!r} has shape {np.shape(g)}, expected {store.params[n].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {n!r}")
    grads = {n: np.asarray(grads[n], dtype=np.float64) for n in store.names() if n in grads}
    clipped, _ = clip_by_global_norm(grads, clip_norm)
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in store.names():
        if n not in clipped:
            continue
        g = clipped[n]
        m = store.adam_m[n] = beta1 * store.adam_m[n] + (1.0 - beta1) * g
        v = store.adam_v[n] = beta2 * store.adam_v[n] + (1.0 - beta2) * (g * g)
        store.params[n].data = store.params[n].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def _write_array(fh, a):
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def save_checkpoint(path_or_fh, store: ParamStore, extra: dict | None = None) -> None:
    """Write the NDF1 binary checkpoint.

    Layout: magic, u32 version, u32 count, then per name-sorted parameter
    (u32 name length, name, u32 ndim, u64 dims, f64 values), then the Adam
    first and second moments in the same order, then u64 step count.
    ``extra`` is an optional JSON-able dict appended as a length-prefixed blob.
    """
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "wb") if own else path_or_fh
    try:
        names = store.names()
        fh.write(NDF_MAGIC)
        fh.write(struct.pack("<II", NDF_VERSION, len(names)))
        for n in names:
            raw = n.encode("utf-8")
            a = store.params[n].data
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            _write_array(fh, a)
        for n in names:
            _write_array(fh, store.adam_m[n])
        for n in names:
            _write_array(fh, store.adam_v[n])
        fh.write(struct.pack("<Q", store.step_count))
        blob = json.dumps(extra or {}, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    finally:
        if own:
            fh.close()


def load_checkpoint(path_or_fh):
    """Inverse of :func:`save_checkpoint`; returns ``(store, extra)``."""
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "rb") if own else path_or_fh
    try:
        if fh.read(4) != NDF_MAGIC:
            raise ValueError("not an NDF1 checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != NDF_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        store = ParamStore()
        shapes = []
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            store.add(name, data)
            shapes.append((name, shape, size))
        for buf in (store.adam_m, store.adam_v):
            for name, shape, size in shapes:
                buf[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        (store.step_count,) = struct.unpack("<Q", fh.read(8))
        (blen,) = struct.unpack("<Q", fh.read(8))
        extra = json.loads(fh.read(blen).decode("utf-8")) if blen else {}
        return store, extra
    finally:
        if own:
            fh.close()
