"""Minimal dense tensors with reverse-mode differentiation.

All arithmetic is float64 and unbatched. Every op records a closure that maps
the output gradient onto its inputs; ``Tensor.backward`` walks the graph in
reverse topological order and deposits gradients on leaf tensors only.
"""
import itertools
import math

import numpy as np

from .errors import NumericDomainError, ShapeError


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Attributes:
        data (np.ndarray): row-major values.
        requires_grad (bool): whether gradients flow into this tensor.
        grad (np.ndarray | None): set on leaves by ``backward``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
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

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a dotted name such as ``hsd.de.weight``."""

    def __init__(self, data, name):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def uniform_init(rng, shape, fan_in, name):
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{op}: non-finite input")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    if np.any(x.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tabs(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softplus(x):
    """log(1 + exp(x)), evaluated without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _make(out, (x,), lambda g: (g * sig,))


# ----------------------------------------------------------------- structural

def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index):
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)
    return _make(x.data[index], (x,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# ----------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x, axis):
    """Max along one axis; the gradient goes to the lowest-index maximiser."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)
    return _make(out, (x,), back)


# ----------------------------------------------------------------- linear ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
        if a.ndim > 1:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:
            gb = np.outer(a.data, g)
        return ga, gb
    return _make(a.data @ b.data, (a, b), back)


def conv(x, w, b=None, stride=1, padding=0):
    """Unbatched N-d cross-correlation.

    x: (C, *spatial), w: (O, C, *kernel), b: (O,) or None.
    Implemented as one tensordot per kernel offset, which keeps memory at
    the size of the output instead of a full im2col buffer.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = x.ndim - 1
    if w.ndim != nd + 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv: weight {w.shape} does not match input {x.shape}")
    ksize = w.shape[2:]
    xp = np.pad(x.data, [(0, 0)] + [(padding, padding)] * nd)
    out_sp = tuple((xp.shape[1 + d] - ksize[d]) // stride + 1 for d in range(nd))
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"conv: input {x.shape} too small for kernel {ksize}")

    def window(offset):
        return tuple([slice(None)] + [slice(o, o + stride * (n - 1) + 1, stride)
                                      for o, n in zip(offset, out_sp)])

    offsets = list(itertools.product(*[range(k) for k in ksize]))
    out = np.zeros((w.shape[0],) + out_sp)
    for off in offsets:
        out += np.tensordot(w.data[(slice(None), slice(None)) + off], xp[window(off)], axes=(1, 0))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape((-1,) + (1,) * nd)
        parents.append(b)

    def back(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        sp_axes = list(range(1, nd + 1))
        for off in offsets:
            win = window(off)
            wk = w.data[(slice(None), slice(None)) + off]
            if gw is not None:
                gw[(slice(None), slice(None)) + off] = np.tensordot(g, xp[win], axes=(sp_axes, sp_axes))
            if gx is not None:
                gx[win] += np.tensordot(wk, g, axes=(0, 0))
        if gx is not None and padding:
            gx = gx[tuple([slice(None)] + [slice(padding, -padding)] * nd)]
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=tuple(sp_axes)))
        return tuple(res)
    return _make(out, parents, back)


def bilinear_sample(feat, xs, ys):
    """Sample a (C, H, W) map at continuous pixel coordinates.

    Integer coordinates hit pixel centres exactly. Coordinates are clamped
    to the map so border samples stay differentiable; the coordinates
    themselves carry no gradient. Returns (C, N).
    """
    feat = as_tensor(feat)
    _, h, w = feat.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    corners = [(y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
               (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)]
    d = feat.data
    out = sum(d[:, yy, xx] * ww for yy, xx, ww in corners)

    def back(g):
        full = np.zeros_like(d)
        for yy, xx, ww in corners:
            np.add.at(full, (slice(None), yy, xx), g * ww)
        return (full,)
    return _make(out, (feat,), back)


def gather(x, idx, axis=-1):
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)
    return _make(np.take(x.data, idx, axis=axis), (x,), back)


def scatter_add(base, idx, src, axis=-1):
    """Return ``base`` with ``src`` added at positions ``idx`` along ``axis``."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(idx, dtype=np.intp)
    out = base.data.copy()
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(src.data, axis, 0))
    return _make(out, (base, src), lambda g: (g, np.take(g, idx, axis=axis)))


def upsample_nearest(x, factor):
    """Repeat every spatial axis of (C, *spatial) ``factor`` times."""
    out = x.data
    for ax in range(1, x.ndim):
        out = np.repeat(out, factor, axis=ax)

    def back(g):
        shape = [x.shape[0]]
        for n in x.shape[1:]:
            shape += [n, factor]
        return (g.reshape(shape).sum(axis=tuple(range(2, 2 * x.ndim, 2))),)
    return _make(out, (x,), back)


# ------------------------------------------------------- softmax and friends

def softmax(x, axis=-1):
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def scaled_dot_attention(queries, keys, values):
    """Single-head attention: softmax(Q K^T / sqrt(d)) V."""
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise ShapeError("attention expects 2-d queries, keys and values")
    d = queries.shape[1]
    if d == 0 or keys.shape[0] == 0 or keys.shape[1] != d or values.shape[0] != keys.shape[0]:
        raise ShapeError(f"attention: incompatible shapes {queries.shape}, {keys.shape}, {values.shape}")
    scores = matmul(queries, transpose(keys)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=1), values)


KL_FLOOR = 1e-12


def kl_divergence(p, q, atol=1e-9):
    """KL(p || q) = sum p log(p / q) after clamping both to [1e-12, 1]."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    for name, t in (("p", p), ("q", q)):
        _check_finite(t.data, "kl_divergence")
        if abs(t.data.sum() - 1.0) > atol:
            raise NumericDomainError(f"kl_divergence: {name} sums to {t.data.sum()!r}, not 1")
    pc = clip(p, KL_FLOOR, 1.0)
    qc = clip(q, KL_FLOOR, 1.0)
    return tsum(pc * (log(pc) - log(qc)))


def cross_entropy(logits, labels, mask=None):
    """Mean cross-entropy over the masked columns of (K, N) logits."""
    labels = np.asarray(labels, dtype=np.intp)
    cols = np.arange(labels.size) if mask is None else np.flatnonzero(mask)
    if cols.size == 0:
        raise NumericDomainError("cross_entropy: no voxels to average over")
    lp = log_softmax(logits, axis=0)
    picked = lp[labels[cols], cols]
    return -mean(picked)


def binary_cross_entropy(logits, targets, mask=None):
    """Mean BCE-with-logits over masked entries of a flat logit vector."""
    targets = np.asarray(targets, dtype=np.float64)
    cols = np.arange(targets.size) if mask is None else np.flatnonzero(mask)
    if cols.size == 0:
        return Tensor(0.0)
    z = logits[cols]
    t = targets[cols]
    # y*softplus(-z) + (1-y)*softplus(z) == softplus(z) - y*z
    return mean(softplus(z) - z * t)


# -------------------------------------------------------------- verification

def grad_check(f, params, eps=1e-6, max_entries=None, rng=None):
    """Largest relative gap between backprop and central differences.

    ``f`` rebuilds the graph from scratch on each call and returns a scalar
    Tensor. The error for one entry is |analytic - numeric| / max(1, |analytic|).
    ``max_entries`` caps the probes per parameter (chosen with ``rng``).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericDomainError("grad_check: f is non-finite at the base point")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        probe = np.arange(n)
        if max_entries is not None and n > max_entries:
            probe = np.sort(rng.choice(n, size=max_entries, replace=False))
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                name = getattr(p, "name", "?")
                raise NumericDomainError(f"grad_check: f is non-finite probing {name}[{i}]")
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.zero_grad()
    return worst
