"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the grasp network needs are provided.  Feature volumes are
channels-first ``(C, D, H, W)``.  Each op records a closure mapping the output
gradient to gradients of its inputs; :meth:`Tensor.backward` replays them in
reverse topological order.
"""
from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError, UsageError

DEBUG = bool(os.environ.get("VOXGRASP_DEBUG"))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate gradients into every leaf that requires them."""
        if not self.requires_grad:
            raise UsageError("tensor was not produced by a recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced")
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (numpy broadcasting rules)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements."""
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(edges[i], edges[i + 1]), axis=axis) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop], (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def gather_sites(a: Tensor, sites) -> Tensor:
    """Values of a ``(C, D, H, W)`` volume at integer voxel sites ``(P, 3)``, shape ``(C, P)``."""
    idx = np.asarray(sites, dtype=np.int64)
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None), i, j, k), g)
        return (out,)

    return _make(a.data[:, i, j, k], (a,), back)


def take(a: Tensor, idx, axis: int = -1) -> Tensor:
    """Entries ``idx`` along ``axis`` (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.data.ndim

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


# -- linear algebra -------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape ``(..., C_in)`` and ``w`` of shape ``(C_out, C_in)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(y, parents, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of ``(C, D, H, W)``, shape ``(C,)``."""
    c = x.shape[0]
    count = x.data[0].size
    flat = x.data.reshape(c, -1)
    return _make(flat.sum(axis=1) / count, (x,),
                 lambda g: (np.broadcast_to((g / count)[:, None], flat.shape).reshape(x.shape).copy(),))


def mlp2(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Two linear layers with a rectifier between and a sigmoid gate on the output."""
    return sigmoid(linear(relu(linear(x, w1, b1)), w2, b2))


def softmax_rows(s: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D array, with the row maximum subtracted first."""
    p = _softmax(s.data)

    def back(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (s,), back)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- convolution ----------------------------------------------------------------


def _offsets(k):
    r = range(k)
    return [(a, b, c) for a in r for b in r for c in r]


def conv3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3-D cross-correlation with 'same' padding.

    ``x`` is ``(C_in, D, H, W)``, ``w`` is ``(C_out, C_in, k, k, k)`` with k in {1, 3}.
    Stride 2 halves every extent and needs even extents.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError("conv3 expects a (C, D, H, W) input and (O, C, k, k, k) weights")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k not in (1, 3):
        raise ShapeError("kernel must be 1x1x1 or 3x3x3")
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, weights expect {cin}")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    d, h, wd = x.shape[1:]
    if stride == 2 and (d % 2 or h % 2 or wd % 2):
        raise ShapeError("stride 2 needs even spatial extents")
    s = stride
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    offs = _offsets(k)
    out = np.zeros((cout, d // s, h // s, wd // s), dtype=np.result_type(x.data, w.data))
    for a, bb, c in offs:
        xs = xp[:, a : a + d : s, bb : bb + h : s, c : c + wd : s]
        out += np.tensordot(w.data[:, :, a, bb, c], xs, axes=1)
    if b is not None:
        out += b.data[:, None, None, None]

    def back(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for a, bb, c in offs:
            sl = (slice(None), slice(a, a + d, s), slice(bb, bb + h, s), slice(c, c + wd, s))
            if gw is not None:
                gw[:, :, a, bb, c] = np.tensordot(g, xp[sl], axes=([1, 2, 3], [1, 2, 3]))
            if gxp is not None:
                gxp[sl] += np.tensordot(w.data[:, :, a, bb, c].T, g, axes=1)
        gx = None
        if gxp is not None:
            gx = gxp[:, pad : pad + d, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2, 3)),)
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


def conv3_at(x: Tensor, w: Tensor, b: Tensor | None, sites) -> Tensor:
    """A 3x3x3 stride-1 'same' convolution evaluated only at voxel ``sites`` ``(P, 3)``.

    Returns ``(C_out, P)``, equal to ``gather_sites(conv3(x, w, b), sites)``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.shape[2:] != (3, 3, 3):
        raise ShapeError("conv3_at needs a 3x3x3 kernel")
    idx = np.asarray(sites, dtype=np.int64)
    cin = x.shape[0]
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    offs = np.array(_offsets(3))
    # patch rows ordered (channel, offset) to match w.reshape(cout, cin * 27)
    ii = idx[None, :, 0] + offs[:, 0, None]
    jj = idx[None, :, 1] + offs[:, 1, None]
    kk = idx[None, :, 2] + offs[:, 2, None]
    patches = xp[:, ii, jj, kk].reshape(cin * 27, -1)
    wm = w.data.reshape(cout, cin * 27)
    out = wm @ patches
    if b is not None:
        out = out + b.data[:, None]

    def back(g):
        gw = (g @ patches.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gp = (wm.T @ g).reshape(cin, 27, -1)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), ii, jj, kk), gp)
            gx = gxp[:, 1:-1, 1:-1, 1:-1]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=1),)
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


def conv1_cols(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """A 1x1x1 convolution applied to feature columns ``(C_in, P)``, returns ``(C_out, P)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    wm = w.data.reshape(w.shape[0], w.shape[1])
    out = wm @ x.data
    if b is not None:
        out = out + b.data[:, None]

    def back(g):
        grads = (wm.T @ g, (g @ x.data.T).reshape(w.shape))
        if b is not None:
            grads += (g.sum(axis=1),)
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


# -- resampling -----------------------------------------------------------------


def _up_axis(a, axis):
    """Linear x2 upsampling along one axis, half-pixel centers, edge clamped."""
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_adjoint(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    shape = list(g.shape)
    shape[axis] = n
    shape.insert(axis + 1, 2)
    gs = g.reshape(shape)
    even = np.take(gs, 0, axis=axis + 1)
    odd = np.take(gs, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    # even output i drew 0.25 from i-1 (clamped at 0), odd output i from i+1 (clamped at n-1)
    sl = [slice(None)] * out.ndim
    lead = list(sl)
    lead[axis] = slice(0, n - 1)
    tail = list(sl)
    tail[axis] = slice(1, n)
    out[tuple(lead)] += 0.25 * even[tuple(tail)]
    out[tuple(tail)] += 0.25 * odd[tuple(lead)]
    first = list(sl)
    first[axis] = slice(0, 1)
    last = list(sl)
    last[axis] = slice(n - 1, n)
    out[tuple(first)] += 0.25 * even[tuple(first)]
    out[tuple(last)] += 0.25 * odd[tuple(last)]
    return out


def upsample_x2(x: Tensor) -> Tensor:
    """Trilinear x2 upsampling of ``(C, D, H, W)`` (half-voxel aligned, edges clamped)."""
    y = x.data
    for ax in (1, 2, 3):
        y = _up_axis(y, ax)

    def back(g):
        for ax in (3, 2, 1):
            g = _up_axis_adjoint(g, ax)
        return (g,)

    return _make(y, (x,), back)


def _trilinear_weights(coords, shape):
    n = np.array(shape)
    u = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(n - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    corners = []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = i1[:, 0] if cx else i0[:, 0]
                iy = i1[:, 1] if cy else i0[:, 1]
                iz = i1[:, 2] if cz else i0[:, 2]
                wgt = (f[:, 0] if cx else 1 - f[:, 0]) * (f[:, 1] if cy else 1 - f[:, 1]) * (
                    f[:, 2] if cz else 1 - f[:, 2])
                corners.append((ix, iy, iz, wgt))
    return corners


def trilinear_points(x: Tensor, coords) -> Tensor:
    """Sample ``(C, D, H, W)`` at continuous voxel coordinates ``(P, 3)``, returns ``(P, C)``.

    Coordinate ``u`` addresses voxel centers at integers; values beyond the outer
    centers are clamped to the boundary.
    """
    corners = _trilinear_weights(coords, x.shape[1:])
    out = 0.0
    for ix, iy, iz, wgt in corners:
        out = out + x.data[:, ix, iy, iz] * wgt
    out = np.ascontiguousarray(out.T)

    def back(g):
        gx = np.zeros_like(x.data)
        gt = g.T
        for ix, iy, iz, wgt in corners:
            np.add.at(gx, (slice(None), ix, iy, iz), gt * wgt)
        return (gx,)

    return _make(out, (x,), back)


# -- attention ------------------------------------------------------------------


def mixture_attention(q: Tensor, v: Tensor, pi: Tensor, parts: int, block: int = 512) -> Tensor:
    """Mixture-of-softmax self-attention with shared queries and keys.

    ``q`` is ``(d, M)``, ``v`` is ``(d_v, M)`` and ``pi`` holds ``parts`` mixture
    weights.  Part ``n`` uses channels ``n*d/parts .. (n+1)*d/parts`` of ``q`` as
    both query and key; its scores are scaled by ``1/sqrt(d)``.  With
    ``A = sum_n pi_n softmax_rows(S_n)`` the output is ``v @ A.T``.  Rows of ``A``
    are formed ``block`` at a time, so memory stays ``O(block * M)`` and the result
    does not depend on ``block``.
    """
    d, m = q.shape
    if d % parts:
        raise ShapeError(f"{parts} parts do not divide {d} query channels")
    dp = d // parts
    c = 1.0 / math.sqrt(d)
    qd, vd, pd = q.data, v.data, pi.data
    qn = [qd[n * dp : (n + 1) * dp] for n in range(parts)]

    def probs(n, rows):
        return _softmax(c * (qn[n][:, rows].T @ qn[n]))

    out = np.empty((vd.shape[0], m), dtype=np.result_type(qd, vd))
    for start in range(0, m, block):
        rows = slice(start, min(start + block, m))
        a = sum(pd[n] * probs(n, rows) for n in range(parts))
        out[:, rows] = vd @ a.T

    def back(g):
        gq = np.zeros_like(qd)
        gv = np.zeros_like(vd)
        gpi = np.zeros_like(pd)
        for start in range(0, m, block):
            rows = slice(start, min(start + block, m))
            ga = g[:, rows].T @ vd  # (b, M)
            ps = [probs(n, rows) for n in range(parts)]
            a = sum(pd[n] * ps[n] for n in range(parts))
            gv += g[:, rows] @ a
            for n in range(parts):
                p = ps[n]
                gpi[n] += np.sum(ga * p)
                gp = pd[n] * ga
                gs = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
                sl = slice(n * dp, (n + 1) * dp)
                # S = c * Qn[:, rows].T @ Qn: both factors depend on Qn
                gq[sl] += c * (qn[n][:, rows] @ gs)  # key side
                gq[sl, rows] += c * (qn[n] @ gs.T)  # query side
        return gq, gv, gpi

    return _make(out, (q, v, pi), back)


# -- grasp heads and losses -----------------------------------------------------


def normalize_quat(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Unit-normalize along axis 0; vectors with norm below ``eps`` become (1, 0, 0, 0)."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=0, keepdims=True))
    small = norm < eps
    safe = np.where(small, 1.0, norm)
    y = x.data / safe
    if np.any(small):
        basis = np.zeros_like(y)
        basis[0] = 1.0
        y = np.where(small, basis, y)

    def back(g):
        gx = (g - y * np.sum(g * y, axis=0, keepdims=True)) / safe
        return (np.where(small, 0.0, gx),)

    return _make(y, (x,), back)


def normalize_rows(x: Tensor) -> tuple:
    """L2-normalize rows of ``(P, D)``.  Zero rows map to e1 with zero gradient; returns (tensor, flags)."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    degenerate = (norm[:, 0] == 0.0)
    safe = np.where(norm == 0.0, 1.0, norm)
    y = x.data / safe
    if np.any(degenerate):
        y[degenerate] = 0.0
        y[degenerate, 0] = 1.0

    def back(g):
        gx = (g - y * np.sum(g * y, axis=1, keepdims=True)) / safe
        gx[degenerate] = 0.0
        return (gx,)

    return _make(y, (x,), back), degenerate


def bce_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """Per-element weighted binary cross-entropy ``-w (t ln p + (1-t) ln(1-p))``, ``p = sigmoid(z)``."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    # log(1 + exp(-|z|)) form avoids overflow
    loss = w * (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def back(g):
        return (g * w * (_sigmoid(z) - t),)

    return _make(loss, (logits,), back)


def rotation_loss(qhat: Tensor, qgt) -> Tensor:
    """``min(1 - |<qhat, q>|, 1 - |<qhat, q o roll_pi>|)`` per column of ``(4, P)`` arrays."""
    from .geometry import quat_multiply, roll_pi

    q = np.asarray(qgt, dtype=qhat.dtype)
    q_roll = quat_multiply(q.T, roll_pi().as_array()).T
    d1 = np.sum(qhat.data * q, axis=0)
    d2 = np.sum(qhat.data * q_roll, axis=0)
    l1 = 1.0 - np.abs(d1)
    l2 = 1.0 - np.abs(d2)
    first = l1 <= l2
    loss = np.where(first, l1, l2)

    def back(g):
        grad1 = -np.sign(d1) * q
        grad2 = -np.sign(d2) * q_roll
        return (g * np.where(first, grad1, grad2),)

    return _make(loss, (qhat,), back)


# -- parameters, optimizer, schedule --------------------------------------------


class ParamStore:
    """Named parameters with gradient slots and Adam moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._leaves: dict[str, Tensor] = {}

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise DomainError(f"duplicate parameter {name}")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def names(self) -> list:
        return list(self.params)

    def __getitem__(self, name: str) -> Tensor:
        """Leaf tensor for ``name`` in the current forward pass."""
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Tensor(self.params[name], requires_grad=True, name=name)
            self._leaves[name] = leaf
        return leaf

    def collect(self) -> None:
        """Move leaf gradients from the last backward pass into the gradient slots."""
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self.grads[name] += leaf.grad
        self._leaves = {}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0
        self._leaves = {}

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g[...] = 0.0
    store._leaves = {}


def one_cycle_lr(step: int, total_steps: int, lr_init: float = 4e-5, lr_max: float = 4e-4,
                 warmup: float = 0.3, final_div: float = 25.0) -> float:
    """Cosine ramp ``lr_init -> lr_max`` over the warmup share, then cosine decay to ``lr_init / final_div``."""
    if not 0 <= step <= total_steps:
        raise DomainError("step must lie in [0, total_steps]")
    if not lr_init < lr_max:
        raise DomainError("lr_init must be below lr_max")
    if total_steps == 0:
        return lr_init
    peak = warmup * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return lr_init + (lr_max - lr_init) * (1.0 - math.cos(math.pi * frac)) / 2.0
    lr_end = lr_init / final_div
    frac = (step - peak) / (total_steps - peak)
    return lr_end + (lr_max - lr_end) * (1.0 + math.cos(math.pi * frac)) / 2.0


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"VGCK"
CKPT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_checkpoint(records, path) -> None:
    """Write ordered ``(name, array)`` records.  Each record carries its float width (4 or 8 bytes)."""
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        code = 8 if arr.dtype == np.float64 else 4
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> list:
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data, path)


def checkpoint_from_bytes(data: bytes, path=None) -> list:
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", path, 0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", path, len(data))
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    off = 12
    records = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            if off + nlen > len(data):
                raise struct.error("name")
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            if code not in _DTYPES:
                raise FormatError(f"unknown element width {code}", path, off - 2)
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * code
            if off + nbytes > len(data):
                raise struct.error("payload")
            arr = np.frombuffer(data, dtype=_DTYPES[code], count=nbytes // code, offset=off).reshape(shape)
            off += nbytes
            records.append((name, arr.astype(_DTYPES[code].newbyteorder("="))))
    except struct.error as exc:
        raise FormatError("truncated checkpoint", path, off) from exc
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint records", path, off)
    return records


# -- gradient checking ----------------------------------------------------------


def numeric_grad(fn, arrays, index: int, eps: float = 1e-5, positions=None) -> np.ndarray:
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``positions`` restricts the check to a list of flat indices; other entries are 0.
    """
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if positions is None else positions
    for i in todo:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(*arrays))
        flat[i] = orig - eps
        fm = float(fn(*arrays))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def check_gradients(build, arrays, eps: float = 1e-5, seed: int = 0, positions=None) -> list:
    """Relative error of analytic vs numeric gradients for every input of ``build``.

    ``build`` maps tensors to an output tensor; it is reduced to a scalar with a
    fixed random projection so every output element is exercised.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * proj))

    total(mul(out, proj)).backward()
    errs = []
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, arrays, i, eps, positions)
        ana = np.zeros_like(arrays[i]) if leaf.grad is None else leaf.grad
        if positions is not None:
            mask = np.zeros(ana.size, dtype=bool)
            mask[list(positions)] = True
            ana = np.where(mask.reshape(ana.shape), ana, 0.0)
        errs.append(relative_error(ana, num))
    return errs
