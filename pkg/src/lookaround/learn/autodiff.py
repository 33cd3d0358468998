"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the primitives the training losses need are provided. Every op records
its parents and a closure that accumulates gradients into them; ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000  # make ndarray (op) Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    # -- housekeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g):
        if self.grad is None:
            # gradients are never updated in place, so sharing memory is safe
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _op(data, parents, backward):
    return Tensor(data, _parents=tuple(parents), _backward=backward)


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _op(out, (a, b), bw)


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    r2 = y.data * y.data + x.data * x.data
    safe = np.where(r2 > 0, r2, 1.0)

    def bw(g):
        if y.requires_grad:
            y._accum(_unbroadcast(np.where(r2 > 0, g * x.data / safe, 0.0), y.shape))
        if x.requires_grad:
            x._accum(_unbroadcast(np.where(r2 > 0, -g * y.data / safe, 0.0), x.shape))

    return _op(np.arctan2(y.data, x.data), (y, x), bw)


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _op(np.where(cond, a.data, b.data), (a, b), bw)


# -- elementwise unary -------------------------------------------------------


def _unary(x, value, dvalue):
    x = as_tensor(x)

    def bw(g):
        x._accum(g * dvalue())

    return _op(value, (x,), bw)


def power(x, p: float):
    x = as_tensor(x)
    return _unary(x, x.data ** p, lambda: p * x.data ** (p - 1))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out)


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0))


def tabs(x):
    """``|x|`` with subgradient 0 at 0."""
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def sin(x):
    x = as_tensor(x)
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data))


def cos(x):
    x = as_tensor(x)
    return _unary(x, np.cos(x.data), lambda: -np.sin(x.data))


def softplus(x):
    x = as_tensor(x)
    d = x.data
    out = np.where(d > 30, d, np.log1p(np.exp(np.minimum(d, 30))))
    return _unary(x, out, lambda: 1.0 / (1.0 + np.exp(-d)))


def leaky_relu(x, slope: float = 0.2):
    x = as_tensor(x)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, slope * x.data), lambda: np.where(pos, 1.0, slope))


def maximum(x, floor: float):
    """``max(x, floor)`` against a constant floor; gradient passes where ``x > floor``."""
    x = as_tensor(x)
    keep = x.data > floor
    return _unary(x, np.where(keep, x.data, floor), lambda: keep.astype(np.float64))


def half_sinc(theta):
    """``sin(theta/2) / theta`` with a series expansion near zero."""
    x = as_tensor(theta)
    t = x.data
    small = np.abs(t) < 1e-4
    ts = np.where(small, 1.0, t)
    val = np.where(small, 0.5 - t * t / 48.0, np.sin(0.5 * ts) / ts)
    deriv = np.where(small, -t / 24.0, (0.5 * ts * np.cos(0.5 * ts) - np.sin(0.5 * ts)) / (ts * ts))
    return _unary(x, val, lambda: deriv)


# -- reductions --------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def bw(g):
        x._accum(_expand(g, x.shape, axis, keepdims))

    return _op(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def sorted_sum(x, axis: int = 0):
    """Sum along ``axis`` after sorting, so the rounding is independent of input order."""
    x = as_tensor(x)

    def bw(g):
        x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _op(np.sort(x.data, axis=axis).sum(axis=axis), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def tmax(x, axis: int):
    """Max along one axis; the gradient goes to the first maximiser."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x._accum(full)

    return _op(out, (x,), bw)


def norm(x, axis=-1, keepdims=False):
    """Euclidean norm with subgradient 0 at the origin."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        x._accum(np.where(out > 0, gk * x.data / safe, 0.0))

    return _op(out if keepdims else out.squeeze(axis), (x,), bw)


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            bd = b.data if b.ndim > 1 else b.data[:, None]
            gg = g if b.ndim > 1 else g[..., None]
            a._accum(_unbroadcast(gg @ np.swapaxes(bd, -1, -2), a.shape))
        if b.requires_grad:
            ad = a.data if a.ndim > 1 else a.data[None, :]
            gg = g if a.ndim > 1 else g[..., None, :]
            gb = np.swapaxes(ad, -1, -2) @ (gg if b.ndim > 1 else gg[..., None])
            b._accum(_unbroadcast(gb if b.ndim > 1 else gb[..., 0], b.shape))

    return _op(a.data @ b.data, (a, b), bw)


def getitem(x, idx):
    x = as_tensor(x)

    basic = not any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        x._accum(full)

    return _op(x.data[idx], (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    return _op(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return _op(np.swapaxes(x.data, a1, a2), (x,), lambda g: x._accum(np.swapaxes(g, a1, a2)))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, cuts, axis=axis)):
            if x.requires_grad:
                x._accum(piece)

    return _op(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accum(np.take(g, i, axis=axis))

    return _op(np.stack([x.data for x in xs], axis=axis), xs, bw)


# -- gradient helpers --------------------------------------------------------


def grad(loss_fn, params: dict, *args, **kwargs):
    """Gradients of ``loss_fn(tensors, *args)`` for every array in ``params``.

    Returns ``(loss_value, {name: gradient})``.
    """
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_fn(tensors, *args, **kwargs)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if loss.requires_grad:
        loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return float(loss.data), grads


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out
