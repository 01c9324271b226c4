"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a backward closure to the active tape.
``backward(loss)`` replays the tape in reverse, accumulating gradients into
each participating tensor, then clears the tape.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..validation import NumericFault


class Tape:
    def __init__(self):
        self.entries = []
        self.enabled = True

    def record(self, out, backward_fn):
        out._tape_index = len(self.entries)
        self.entries.append((out, backward_fn))

    def clear(self):
        for out, _ in self.entries:
            out._tape_index = None
        self.entries = []


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape_index", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._tape_index = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(*tensors) -> bool:
    return _TAPE.enabled and any(t.requires_grad for t in tensors)


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite output in {op}")
    return arr


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward_fn, op):
    out = Tensor(_finite(data, op))
    if _needs_tape(*parents):
        out.requires_grad = True
        _TAPE.record(out, backward_fn)
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` of every tensor that contributed to scalar ``loss``."""
    if loss.size != 1:
        raise ValueError("backward expects a scalar loss")
    idx = loss._tape_index
    if idx is None or idx >= len(_TAPE.entries) or _TAPE.entries[idx][0] is not loss:
        raise RuntimeError("backward called on a value that is not on the tape")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_TAPE.entries[: idx + 1]):
        if out.grad is not None:
            fn(out.grad)
    for out, _ in _TAPE.entries:
        out.grad = None
    _TAPE.clear()


# --- elementwise and structural ops ----------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """Batched matmul; ``b`` may be 2-D and shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, W, b=None) -> Tensor:
    """x @ W + b over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    b = None if b is None else as_tensor(b)
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            _accum(W, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(out, parents, bw, "affine")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def slice_(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accum(x, full)

    return _make(x.data[index], (x,), bw, "slice")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast_to")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def bw(g):
        _accum(x, np.full(x.shape, g / n))

    return _make(np.asarray(x.data.mean()), (x,), bw, "mean")


# --- nonlinearities and layers ---------------------------------------------

def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x) -> Tensor:
    x = as_tensor(x)
    s = sigmoid_np(x.data)

    def bw(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _make(x.data * s, (x,), bw, "swish")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), bw, "tanh")


def layer_norm(x, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalise the last axis; variance is floored by ``eps``."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        lead = g.reshape(-1, g.shape[-1])
        if gamma is not None and gamma.requires_grad:
            _accum(gamma, (lead * xhat.reshape(lead.shape)).sum(axis=0))
        if beta is not None and beta.requires_grad:
            _accum(beta, lead.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(out, parents, bw, "layer_norm")


def attention(queries, keys, values, mask=None, n_heads=1) -> Tensor:
    """Scaled dot-product attention over (B, T, D) inputs.

    ``mask`` is added to the (Tq, Tk) or (B, Tq, Tk) logits before the softmax;
    use ``-inf`` entries to exclude keys.
    """
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    B, Tq, D = q.shape
    Tk = k.shape[1]
    if k.shape != (B, Tk, D) or v.shape != (B, Tk, D) or D % n_heads:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape} heads={n_heads}")
    dh = D // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        logits = logits + (m[:, None] if m.ndim == 3 else m)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, D)

    def bw(g):
        gh = g.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
        if v.requires_grad:
            _accum(v, (p.transpose(0, 1, 3, 2) @ gh).transpose(0, 2, 1, 3).reshape(B, Tk, D))
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            _accum(q, (ds @ kh).transpose(0, 2, 1, 3).reshape(B, Tq, D))
        if k.requires_grad:
            _accum(k, (ds.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(B, Tk, D))

    return _make(out, (q, k, v), bw, "attention")


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = (2.0 / n) * g * diff
        _accum(pred, gd)
        _accum(target, -gd)

    return _make(np.asarray((diff * diff).sum() / n), (pred, target), bw, "mse")
