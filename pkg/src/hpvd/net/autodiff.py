"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the detector needs are provided, each with a hand
written vector-Jacobian product.  Feature maps use the layout
``(C, N, D, H, W)`` so that every convolution is a single matrix product.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))
    return Tensor(a.data + b.data, parents=(a, b), backward=backward)


def scale(a: Tensor, k: float) -> Tensor:
    def backward(g):
        a._accumulate(g * k)
    return Tensor(a.data * k, parents=(a,), backward=backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)
    return Tensor(x.data * mask, parents=(x,), backward=backward)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: Sequence[int] = (1, 1, 1), padding: Sequence[int] = (0, 0, 0),
           kernel_shape: Sequence[int] | None = None) -> Tensor:
    """Cross-correlation of ``x`` (Ci, N, D, H, W) with ``w`` (Co, Ci, kd, kh, kw).

    ``kernel_shape`` lets ``w`` be stored with a different but equally sized
    shape (e.g. a 2D kernel lifted into a 3D plane); gradients are returned in
    the stored shape.
    """
    X = x.data
    ci, n, d, h, wd = X.shape
    co = w.shape[0]
    kd, kh, kw = kernel_shape if kernel_shape is not None else w.shape[2:]
    W = w.data.reshape(co, ci, kd, kh, kw)
    sd, sh, sw = (int(v) for v in stride)
    pd, ph, pw = padding
    Xp = np.pad(X, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if (pd or ph or pw) else X
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    taps = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]

    def window(i, j, k):
        return (slice(None), slice(None),
                slice(i, i + sd * (do - 1) + 1, sd),
                slice(j, j + sh * (ho - 1) + 1, sh),
                slice(k, k + sw * (wo - 1) + 1, sw))

    if len(taps) == 1:
        cols = Xp[window(0, 0, 0)].reshape(ci, -1)
    else:
        cols = np.empty((ci, len(taps), n, do, ho, wo), dtype=X.dtype)
        for t, (i, j, k) in enumerate(taps):
            cols[:, t] = Xp[window(i, j, k)]
        cols = cols.reshape(ci * len(taps), -1)
    wm = W.reshape(co, -1)
    out = (wm @ cols).reshape(co, n, do, ho, wo)
    if b is not None:
        out += b.data.reshape(co, 1, 1, 1, 1)

    def backward(g):
        g2 = g.reshape(co, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(ci, len(taps), n, do, ho, wo)
            gXp = np.zeros(Xp.shape, dtype=X.dtype)
            for t, (i, j, k) in enumerate(taps):
                gXp[window(i, j, k)] += gcols[:, t]
            x._accumulate(gXp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, s, e in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(s, e)
            p._accumulate(g[tuple(idx)])
    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=parts, backward=backward)


_BN_AXES = (1, 2, 3, 4)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, training: bool,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, D, H, W).

    In training mode batch statistics are used and, when ``update_stats`` is
    set, the running buffers are updated in place (unbiased variance).
    In eval mode the running buffers are used and never modified.
    """
    X = x.data
    c = X.shape[0]
    shape = (c, 1, 1, 1, 1)
    if training:
        m = X[0].size
        mu = X.mean(axis=_BN_AXES)
        var = X.var(axis=_BN_AXES)
        if update_stats and running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch norm requires running statistics")
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=_BN_AXES))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=_BN_AXES))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                m = X[0].size
                s1 = dxhat.sum(axis=_BN_AXES).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=_BN_AXES).reshape(shape)
                x._accumulate(inv.reshape(shape) / m * (m * dxhat - s1 - xhat * s2))
            else:
                x._accumulate(dxhat * inv.reshape(shape))
    return Tensor(out, parents=(x, gamma, beta), backward=backward)


def set_moments(items: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Elementwise mean and population variance across a set of equal-shape
    tensors.  Sums run over sorted values so the result does not depend on
    the order of ``items``."""
    if not items:
        raise ValueError("cannot take moments of an empty set")
    shape = items[0].shape
    if any(t.shape != shape for t in items):
        raise ValueError("all set members must share one shape")
    k = len(items)
    S = np.stack([t.data for t in items])
    # float addition of two terms is commutative; longer sums need a fixed order
    ordered = (lambda a: np.sort(a, axis=0)) if k > 2 else (lambda a: a)
    mean = ordered(S).sum(axis=0) / k
    dev = S - mean
    var = ordered(dev * dev).sum(axis=0) / k

    def backward_mean(g):
        for t in items:
            t._accumulate(g / k)

    def backward_var(g):
        for t, dv in zip(items, dev):
            t._accumulate(g * (2.0 / k) * dv)

    return (Tensor(mean, parents=items, backward=backward_mean),
            Tensor(var, parents=items, backward=backward_var))


def upsample_inplane(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling over H and W."""
    out = x.data.repeat(factor, axis=3).repeat(factor, axis=4)

    def backward(g):
        c, n, d, h, w = x.shape
        x._accumulate(g.reshape(c, n, d, h, factor, w, factor).sum(axis=(4, 6)))
    return Tensor(out, parents=(x,), backward=backward)


def focal_loss_sum(logits: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixel-wise focal loss, summed (not normalized).

    Cells with ``target == 1`` are positives; other cells are down-weighted by
    ``(1 - target) ** beta``.  Computed from logits for numerical stability.
    """
    z = logits.data
    p = sigmoid(z)
    log_p = -softplus(-z)
    log_1mp = -softplus(z)
    pos = target == 1
    neg_w = np.where(pos, 0.0, (1.0 - target) ** beta)
    loss = -(np.where(pos, (1 - p) ** alpha * log_p, 0.0)
             + neg_w * p ** alpha * log_1mp).sum()

    def backward(g):
        gpos = (1 - p) ** alpha * (alpha * p * log_p - (1 - p))
        gneg = neg_w * p ** alpha * (p - alpha * (1 - p) * log_1mp)
        logits._accumulate(g * np.where(pos, gpos, gneg))
    return Tensor(np.asarray(loss, dtype=z.dtype), parents=(logits,), backward=backward)


def l1_at(x: Tensor, cells: tuple[np.ndarray, ...], target: np.ndarray) -> Tensor:
    """Sum of |x[:, cells] - target| where ``cells`` indexes the trailing axes."""
    idx = (slice(None),) + tuple(cells)
    diff = x.data[idx] - target
    loss = np.abs(diff).sum()

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g * np.sign(diff))
        x._accumulate(gx)
    return Tensor(np.asarray(loss, dtype=x.data.dtype), parents=(x,), backward=backward)
