"""A small graph-based reverse-mode autodiff over numpy arrays.

Each op returns a `Tensor` that remembers its parents and a closure that pushes
the output gradient back into them. `backward()` walks the graph in reverse
topological order. Only the ops the denoiser needs are implemented.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
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
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o)))

    def __rsub__(self, o):
        return add(as_tensor(o), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    def bw(g):
        a._accum(-g)

    return _node(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    def bw(g):
        a._accum(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        a._accum(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw)


def concat(ts, axis=-1) -> Tensor:
    ts = tuple(as_tensor(t) for t in ts)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def silu(a) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(a.data * s, (a,), bw)


def relu(a) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _node(a.data * mask, (a,), bw)


def abs_(a) -> Tensor:
    def bw(g):
        a._accum(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data
            n = a.data.shape[-1]
            a._accum(inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))

    return _node(xhat * gamma.data + beta.data, (a, gamma, beta), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood over rows; `targets` are integer labels."""
    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = x.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accum(g * p / n)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def conv2d(x, w, b, dilation=1) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    x: (C, H, W); w: (O, C, k, k); b: (O,). Returns (O, H, W).
    """
    C, H, W = x.shape
    O, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, H, W), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i * dilation:i * dilation + H, j * dilation:j * dilation + W]
    cols = cols.reshape(C * k * k, H * W)
    wm = w.data.reshape(O, C * k * k)
    out = (wm @ cols + b.data[:, None]).reshape(O, H, W)

    def bw(g):
        gm = g.reshape(O, H * W)
        if w.requires_grad:
            w._accum((gm @ cols.T).reshape(w.shape))
        if b.requires_grad:
            b._accum(gm.sum(axis=1))
        if x.requires_grad:
            gc = (wm.T @ gm).reshape(C, k, k, H, W)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i * dilation:i * dilation + H, j * dilation:j * dilation + W] += gc[:, i, j]
            x._accum(gxp[:, pad:pad + H, pad:pad + W])

    return _node(out, (x, w, b), bw)


def grid_sample(feat, pos) -> Tensor:
    """Bilinear lookup of feat (D, H, W) at fractional (row, col) positions.

    `pos` has shape S + (2,); integer values hit cell centers. Positions are
    clamped to the grid, so outside points read border values and receive no
    positional gradient. Returns shape S + (D,).
    """
    D, H, W = feat.shape
    r, c = pos.data[..., 0], pos.data[..., 1]
    if not np.all(np.isfinite(pos.data)):
        raise FloatingPointError("non-finite sampling position")
    rc = np.clip(r, 0.0, H - 1)
    cc = np.clip(c, 0.0, W - 1)
    r0 = np.minimum(np.floor(rc).astype(np.int64), max(H - 2, 0))
    c0 = np.minimum(np.floor(cc).astype(np.int64), max(W - 2, 0))
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = (rc - r0)[..., None]
    fc = (cc - c0)[..., None]
    ft = feat.data.transpose(1, 2, 0)  # (H, W, D)
    f00, f01, f10, f11 = ft[r0, c0], ft[r0, c1], ft[r1, c0], ft[r1, c1]
    out = f00 * (1 - fr) * (1 - fc) + f01 * (1 - fr) * fc + f10 * fr * (1 - fc) + f11 * fr * fc

    def bw(g):
        if feat.requires_grad:
            corners = ((r0, c0, (1 - fr) * (1 - fc)), (r0, c1, (1 - fr) * fc),
                       (r1, c0, fr * (1 - fc)), (r1, c1, fr * fc))
            idx = np.concatenate([(ri * W + ci).ravel() for ri, ci, _ in corners])
            vals = np.concatenate([(g * wgt).reshape(-1, D) for _, _, wgt in corners])
            # scatter-add as one sparse product: row idx[k] of the result accumulates vals[k]
            scatter = sparse.csr_matrix((np.ones(len(idx), dtype=vals.dtype), (idx, np.arange(len(idx)))),
                                        shape=(H * W, len(idx)))
            gf = np.asarray(scatter @ vals)
            feat._accum(gf.reshape(H, W, D).transpose(2, 0, 1))
        if pos.requires_grad:
            d_r = ((f10 - f00) * (1 - fc) + (f11 - f01) * fc)
            d_c = ((f01 - f00) * (1 - fr) + (f11 - f10) * fr)
            in_r = (r >= 0) & (r <= H - 1)
            in_c = (c >= 0) & (c <= W - 1)
            gp = np.stack([(g * d_r).sum(axis=-1) * in_r, (g * d_c).sum(axis=-1) * in_c], axis=-1)
            pos._accum(gp)

    return _node(out, (feat, pos), bw)
