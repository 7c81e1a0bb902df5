"""Reverse-mode differentiation over float64 numpy arrays.

Each op builds a node holding its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Non-differentiable points (relu at 0, ties in max
pooling, l1 at equality) are reported through :func:`track_kinks` so that
finite-difference checks can avoid straddling them.
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "track_kinks",
    "add", "sub", "mul", "scale", "matmul", "affine", "relu", "softplus",
    "concat", "reshape", "sum", "mean", "gather_rows", "segment_max",
    "maxpool2d", "avgpool2d", "upsample2d", "normalize", "spade_modulate",
    "bce_with_logits", "l1", "conv2d", "square", "columns",
]


class ShapeError(ValueError):
    pass


class _KinkTracker:
    def __init__(self):
        self.margin = np.inf

    def update(self, value):
        if np.size(value):
            self.margin = min(self.margin, float(np.min(value)))


_trackers: list = []


@contextlib.contextmanager
def track_kinks():
    """Record the smallest distance of any evaluated op to a kink."""
    tracker = _KinkTracker()
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


def _kink(value_fn):
    if _trackers:
        v = value_fn()
        for t in _trackers:
            t.update(v)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def matmul(x, w) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")
    return _node(x.data @ w.data, (x, w),
                 lambda g: (g @ w.data.T if x.requires_grad else None, x.data.T @ g))


def affine(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    return _node(x.data @ w.data + b.data, (x, w, b),
                 lambda g: (g @ w.data.T if x.requires_grad else None, x.data.T @ g, g.sum(axis=0)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    _kink(lambda: np.abs(x.data))
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _node(out, (x,), lambda g: (g * sig,))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _node(out, tensors, backward)


def columns(x, lo: int, hi: int) -> Tensor:
    """Slice ``x[..., lo:hi]``."""
    x = as_tensor(x)
    if not 0 <= lo < hi <= x.shape[-1]:
        raise ShapeError(f"columns: bad range [{lo}, {hi}) for width {x.shape[-1]}")

    def backward(g):
        out = np.zeros_like(x.data)
        out[..., lo:hi] = g
        return (out,)
    return _node(x.data[..., lo:hi], (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return _node(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty input")
    return scale(sum(x, axis=axis), 1.0 / n)


def _scatter_rows(idx, g, n):
    """Sum rows of ``g`` into an ``n``-row array at ``idx`` (sorted segment sums)."""
    out = np.zeros((n,) + g.shape[1:])
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    si = idx[order]
    starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
    out[si[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")

    return _node(x.data[idx], (x,), lambda g: (_scatter_rows(idx, g, x.shape[0]),))


def segment_max(x, segments, n_segments: int) -> Tensor:
    """Per-segment elementwise max of rows; empty segments give zeros.

    ``segments`` assigns each row of ``x`` (N, C) to a segment id.
    """
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    if x.data.ndim != 2 or len(seg) != x.shape[0]:
        raise ShapeError(f"segment_max: rows {x.shape} vs segments {seg.shape}")
    out = np.zeros((n_segments, x.shape[1]))
    if len(seg) == 0:
        return _node(out, (x,), lambda g: (np.zeros_like(x.data),))
    order = np.argsort(seg, kind="stable")
    sseg = seg[order]
    xs = x.data[order]
    starts = np.flatnonzero(np.r_[True, sseg[1:] != sseg[:-1]])
    ids = sseg[starts]
    seg_max = np.maximum.reduceat(xs, starts, axis=0)
    out[ids] = seg_max
    rank = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(sseg)]))
    pos = np.broadcast_to(np.arange(len(sseg))[:, None], xs.shape)
    is_max = xs == seg_max[rank]
    first = np.minimum.reduceat(np.where(is_max, pos, len(sseg)), starts, axis=0)
    src = order[first]  # (n_nonempty, C) original row holding each max

    def gap():
        masked = xs.copy()
        masked[first, np.arange(xs.shape[1])[None, :]] = -np.inf
        second = np.maximum.reduceat(masked, starts, axis=0)
        d = seg_max - second
        return d[np.isfinite(d) & ((seg_max != 0.0) | (second != 0.0))]
    _kink(gap)

    def backward(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(x.shape[1]), src.shape)
        np.add.at(gx, (src, cols), g[ids])
        return (gx,)
    return _node(out, (x,), backward)


def maxpool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"maxpool2d: {H}x{W} not divisible by {k}")
    blocks = x.data.reshape(H // k, k, W // k, k, C).transpose(0, 2, 4, 1, 3).reshape(H // k, W // k, C, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def gap():
        s = np.sort(blocks, axis=-1)
        # exact-zero ties come from inactive relus, whose own margins are tracked
        d = s[..., -1] - s[..., -2]
        return d[(s[..., -1] != 0.0) | (s[..., -2] != 0.0)]
    _kink(gap)

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(H // k, W // k, C, k, k).transpose(0, 3, 1, 4, 2).reshape(H, W, C)
        return (gx,)
    return _node(out, (x,), backward)


def avgpool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"avgpool2d: {H}x{W} not divisible by {k}")
    out = x.data.reshape(H // k, k, W // k, k, C).mean(axis=(1, 3))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k),)
    return _node(out, (x,), backward)


def upsample2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=0), k, axis=1)
    return _node(out, (x,), lambda g: (g.reshape(H, k, W, k, C).sum(axis=(1, 3)),))


def normalize(x, eps: float = 1e-5) -> Tensor:
    """Standardize each row (last axis) to zero mean and unit variance."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc / sigma

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)
    return _node(y, (x,), backward)


def spade_modulate(hidden, gamma, beta, eps: float = 1e-5) -> Tensor:
    hidden, gamma, beta = as_tensor(hidden), as_tensor(gamma), as_tensor(beta)
    if hidden.shape[-1] != gamma.shape[-1] or hidden.shape[-1] != beta.shape[-1]:
        raise ShapeError(f"spade_modulate: lengths {hidden.shape}, {gamma.shape}, {beta.shape}")
    return add(mul(gamma, normalize(hidden, eps)), beta)


def bce_with_logits(logits, targets, weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy of ``targets`` (constant) under ``logits``."""
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs targets {t.shape}")
    if x.data.size == 0:
        raise ShapeError("bce_with_logits: empty input")
    d = x.data
    per = np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d)))
    n = d.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _node(weight * per.mean(), (x,), lambda g: (g * weight * (sig - t) / n,))


def l1(pred, target) -> Tensor:
    """Mean absolute error against a constant target."""
    p = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"l1: pred {p.shape} vs target {t.shape}")
    if p.data.size == 0:
        raise ShapeError("l1: empty input")
    diff = p.data - t
    _kink(lambda: np.abs(diff))
    n = diff.size
    return _node(np.abs(diff).mean(), (p,), lambda g: (g * np.sign(diff) / n,))


def _reflect_pad(a, p):
    return np.pad(a, ((p, p), (p, p), (0, 0)), mode="reflect")


def _reflect_pad_backward(gp, p, H, W):
    # fold mirrored borders back onto their source rows/columns
    g = gp.copy()
    for i in range(1, p + 1):
        g[p + i] += g[p - i]
        g[p + H - 1 - i] += g[p + H - 1 + i]
    g = g[p:p + H]
    for i in range(1, p + 1):
        g[:, p + i] += g[:, p - i]
        g[:, p + W - 1 - i] += g[:, p + W - 1 + i]
    return g[:, p:p + W]


def conv2d(x, w, b) -> Tensor:
    """Same-size 2D convolution of an ``(H, W, Cin)`` map with reflect padding.

    ``w`` has shape ``(k, k, Cin, Cout)`` with odd ``k``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[2] != x.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    k = w.shape[0]
    if k % 2 == 0 or w.shape[1] != k:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape[:2]}")
    H, W, Cin = x.shape
    p = k // 2
    if p and (H <= p or W <= p):
        raise ShapeError(f"conv2d: map {H}x{W} too small for reflect padding {p}")
    xp = _reflect_pad(x.data, p) if p else x.data
    Cout = w.shape[3]
    cols = np.concatenate([xp[dy:dy + H, dx:dx + W] for dy in range(k) for dx in range(k)], axis=-1)
    cols = cols.reshape(H * W, k * k * Cin)
    wm = w.data.reshape(k * k * Cin, Cout)
    out = (cols @ wm + b.data).reshape(H, W, Cout)

    def backward(g):
        g2 = g.reshape(-1, Cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gc = (g2 @ wm.T).reshape(H, W, k * k, Cin)
            gxp = np.zeros_like(xp)
            for o in range(k * k):
                dy, dx = divmod(o, k)
                gxp[dy:dy + H, dx:dx + W] += gc[:, :, o]
            gx = _reflect_pad_backward(gxp, p, H, W) if p else gxp
        return gx, gw, g2.sum(axis=0)
    return _node(out, (x, w, b), backward)
