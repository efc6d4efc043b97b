"""Dense float64 tensors with reverse-mode automatic differentiation.

A deliberately small eager engine. Every operation computes its numpy
result immediately and, while recording is enabled, stores its parents
together with one vector-Jacobian closure per parent. ``backward`` walks
the recorded nodes in reverse creation order, so gradients come out in a
fixed, reproducible accumulation order.

Two properties the rest of the package leans on:

* VJP closures are themselves written in terms of the public ops, so
  running ``backward(..., create_graph=True)`` yields gradients that are
  again differentiable. That is what makes second-order meta-gradients
  possible without any special casing.
* Everything is float64 and every op checks its output for NaN/Inf; a
  non-finite value is an error state, not something to propagate.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericsError, ShapeError

_SEQ = itertools.count()
_GRAD_ENABLED = True

LOG_FLOOR = 1e-12


def _check_finite(arr, name=None):
    """Raise on NaN/Inf. One fused reduction; NaN/Inf always poison the
    sum, so a finite sum proves the array clean. A non-finite sum falls
    back to the exact elementwise check to rule out mere accumulation
    overflow."""
    if not math.isfinite(float(arr.sum())):
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite value entering tensor {name or '(anon)'}")


@contextmanager
def no_grad():
    """Disable graph recording inside the block. Ops run plain numpy."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float64 ndarray plus an optional record of how it was computed.

    ``parents``/``vjps`` are filled in by the ops; user code only ever
    constructs leaves. ``seq`` is a global creation counter: because a
    node is always created after its parents, sorting by ``seq`` is a
    topological order, and backward uses it to accumulate gradients in
    one deterministic order.
    """

    __slots__ = ("data", "parents", "vjps", "requires_grad", "name", "seq")

    def __init__(self, data, parents=(), vjps=(), requires_grad=False, name=None):
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(
            data, dtype=np.float64
        )
        _check_finite(arr, name)
        self.data = arr
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.seq = next(_SEQ)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def tracked(self):
        """True if gradients can flow into or through this node."""
        return self.requires_grad or bool(self.parents)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self, requires_grad=False):
        """A leaf tensor sharing this node's values, cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.parents = ()
        out.vjps = ()
        out.requires_grad = bool(requires_grad)
        out.name = self.name
        out.seq = next(_SEQ)
        return out

    def __repr__(self):
        tag = self.name or ("leaf" if not self.parents else "node")
        return f"Tensor({tag}, shape={self.data.shape})"

    # -- operator sugar (thin wrappers over the module ops) -------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape):
    return Tensor(np.zeros(shape))


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


def ones_like(t):
    return Tensor(np.ones_like(t.data))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*ts):
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t.parents for t in ts)


def _node(data, pairs, name=None):
    """Build a node from (parent, vjp) pairs, dropping untracked parents."""
    live = [(p, v) for p, v in pairs if p.tracked()]
    if not live:
        return Tensor(data, name=name)
    ps, vs = zip(*live)
    return Tensor(data, parents=ps, vjps=vs, name=name)


# -- broadcasting helpers ----------------------------------------------


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


def broadcast_to(x, shape):
    x = _as_tensor(x)
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    if not _track(x):
        return Tensor(data)
    xshape = x.data.shape
    return _node(data, [(x, lambda g: _unbroadcast(g, xshape))])


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if not _track(a, b):
        return Tensor(data)
    ashape, bshape = a.data.shape, b.data.shape
    return _node(
        data,
        [
            (a, lambda g: _unbroadcast(g, ashape)),
            (b, lambda g: _unbroadcast(g, bshape)),
        ],
    )


def neg(x):
    x = _as_tensor(x)
    data = -x.data
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, neg)])


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    if not _track(a, b):
        return Tensor(data)
    ashape, bshape = a.data.shape, b.data.shape
    return _node(
        data,
        [
            (a, lambda g: _unbroadcast(g, ashape)),
            (b, lambda g: _unbroadcast(neg(g), bshape)),
        ],
    )


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    if not _track(a, b):
        return Tensor(data)
    ashape, bshape = a.data.shape, b.data.shape
    return _node(
        data,
        [
            (a, lambda g: _unbroadcast(mul(g, b), ashape)),
            (b, lambda g: _unbroadcast(mul(g, a), bshape)),
        ],
    )


hadamard = mul


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    if not _track(a, b):
        return Tensor(data)
    ashape, bshape = a.data.shape, b.data.shape
    out = None

    def vjp_a(g):
        return _unbroadcast(div(g, b), ashape)

    def vjp_b(g):
        return _unbroadcast(neg(mul(g, div(out, b))), bshape)

    out = _node(data, [(a, vjp_a), (b, vjp_b)])
    return out


def scale(x, c):
    """Multiply by a python scalar constant (no broadcast bookkeeping)."""
    x = _as_tensor(x)
    c = float(c)
    data = x.data * c
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, lambda g: scale(g, c))])


def square(x):
    x = _as_tensor(x)
    data = x.data * x.data
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, lambda g: scale(mul(g, x), 2.0))])


# -- reductions and shape ops --------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    if not _track(x):
        return Tensor(data)
    xshape = x.data.shape

    def vjp(g):
        if axis is None:
            return broadcast_to(g, xshape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            kept = list(xshape)
            for ax in axes:
                kept[ax % len(xshape)] = 1
            g = reshape(g, tuple(kept))
        return broadcast_to(g, xshape)

    return _node(data, [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    data = np.reshape(x.data, shape)
    if not _track(x):
        return Tensor(data)
    xshape = x.data.shape
    return _node(data, [(x, lambda g: reshape(g, xshape))])


def transpose(x):
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    data = x.data.T.copy()
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, transpose)])


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in ts], axis=axis)
    if not _track(*ts):
        return Tensor(data)
    pairs = []
    offset = 0
    ax = axis % ts[0].data.ndim
    for t in ts:
        start, length = offset, t.data.shape[ax]
        pairs.append((t, lambda g, s=start, n=length: narrow(g, ax, s, n)))
        offset += length
    return _node(data, pairs)


def narrow(x, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along one axis."""
    x = _as_tensor(x)
    ax = axis % x.data.ndim
    dim = x.data.shape[ax]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for dim {dim}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, start + length)
    data = x.data[tuple(idx)].copy()
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, lambda g: _pad_slice(g, ax, start, dim))])


def _pad_slice(g, axis, start, total):
    """Adjoint of ``narrow``: embed into zeros of the original extent."""
    g = _as_tensor(g)
    shape = list(g.data.shape)
    length = shape[axis]
    shape[axis] = total
    data = np.zeros(shape)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, start + length)
    data[tuple(idx)] = g.data
    if not _track(g):
        return Tensor(data)
    return _node(data, [(g, lambda gg: narrow(gg, axis, start, length))])


# -- matrix product -------------------------------------------------------


def _matmul2(a, b):
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    if not _track(a, b):
        return Tensor(data)
    return _node(
        data,
        [
            (a, lambda g: _matmul2(g, transpose(b))),
            (b, lambda g: _matmul2(transpose(a), g)),
        ],
    )


def matmul(a, b):
    """Matrix product for 1-D/2-D operands, mirroring ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} x {b.shape}")
    a2 = reshape(a, (1, a.shape[0])) if a.ndim == 1 else a
    b2 = reshape(b, (b.shape[0], 1)) if b.ndim == 1 else b
    out = _matmul2(a2, b2)
    if a.ndim == 1 and b.ndim == 1:
        return reshape(out, ())
    if a.ndim == 1:
        return reshape(out, (out.shape[1],))
    if b.ndim == 1:
        return reshape(out, (out.shape[0],))
    return out


# -- nonlinearities --------------------------------------------------------


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    if not _track(x):
        return Tensor(data)
    mask = Tensor((x.data > 0.0).astype(np.float64))
    return _node(data, [(x, lambda g: mul(g, mask))])


def clamp_min(x, floor):
    x = _as_tensor(x)
    floor = float(floor)
    data = np.maximum(x.data, floor)
    if not _track(x):
        return Tensor(data)
    mask = Tensor((x.data > floor).astype(np.float64))
    return _node(data, [(x, lambda g: mul(g, mask))])


def sigmoid(x):
    x = _as_tensor(x)
    # exp(-logaddexp(0, -x)) is finite for any float64 input.
    data = np.exp(-np.logaddexp(0.0, -x.data))
    if not _track(x):
        return Tensor(data)
    out = None

    def vjp(g):
        return mul(mul(g, out), sub(1.0, out))

    out = _node(data, [(x, vjp)])
    return out


def tanh(x):
    x = _as_tensor(x)
    data = np.tanh(x.data)
    if not _track(x):
        return Tensor(data)
    out = None

    def vjp(g):
        return mul(g, sub(1.0, square(out)))

    out = _node(data, [(x, vjp)])
    return out


def _log_pos(x):
    """log of a tensor already known to be strictly positive."""
    data = np.log(x.data)
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, lambda g: div(g, x))])


def log(x, floor=LOG_FLOOR):
    """Natural log with the argument clamped below at ``floor``."""
    return _log_pos(clamp_min(x, floor))


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)
    if not _track(x):
        return Tensor(data)
    out = None

    def vjp(g):
        inner = sum(mul(g, out), axis=axis, keepdims=True)
        return mul(out, sub(g, inner))

    out = _node(data, [(x, vjp)])
    return out


# -- patch extraction (convolution building blocks) ------------------------


def _im2col_forward(x, kh, kw):
    b, h, w, c = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((b, h, w, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(b * h * w, kh * kw * c)


def _col2im_forward(cols, b, h, w, c, kh, kw):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    c6 = cols.reshape(b, h, w, kh, kw, c)
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, c))
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + h, j : j + w, :] += c6[:, :, :, i, j, :]
    return xp[:, ph : ph + h, pw : pw + w, :]


def im2col(x, kh, kw):
    """Unfold zero-padded k x k neighborhoods into rows.

    Input ``[B, H, W, C]``; output ``[B*H*W, kh*kw*C]`` with stride 1 and
    same-size padding. ``col2im`` is its exact adjoint, and the two call
    each other as VJPs, which keeps convolution differentiable to any
    order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects [B,H,W,C], got {x.shape}")
    if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
        raise ShapeError(f"im2col kernel dims must be odd, got {kh}x{kw}")
    b, h, w, c = x.shape
    data = _im2col_forward(x.data, kh, kw)
    if not _track(x):
        return Tensor(data)
    return _node(data, [(x, lambda g: col2im(g, b, h, w, c, kh, kw))])


def col2im(cols, b, h, w, c, kh, kw):
    """Adjoint of ``im2col``: scatter-add rows back onto the image grid."""
    cols = _as_tensor(cols)
    if cols.data.shape != (b * h * w, kh * kw * c):
        raise ShapeError(f"col2im got {cols.shape}, expected {(b * h * w, kh * kw * c)}")
    data = _col2im_forward(cols.data, b, h, w, c, kh, kw)
    if not _track(cols):
        return Tensor(data)
    return _node(data, [(cols, lambda g: im2col(g, kh, kw))])


def conv2d(x, kernel, bias):
    """Same-size 2-D convolution with zero padding and stride 1.

    ``x`` is ``[H, W, Cin]`` or ``[B, H, W, Cin]``, ``kernel`` is
    ``[kh, kw, Cin, Cout]``, ``bias`` is ``[Cout]``. Implemented as
    im2col + matmul + bias-add, so its backward (and double backward)
    come for free from the primitive VJPs.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    single = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if single else x
    if x4.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh,kw,Cin,Cout], got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    b, h, w, c = x4.shape
    if c != cin:
        raise ShapeError(f"conv2d channels: input has {c}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.shape}")
    cols = im2col(x4, kh, kw)
    kmat = reshape(kernel, (kh * kw * cin, cout))
    out = add(matmul(cols, kmat), bias)
    out = reshape(out, (b, h, w, cout))
    if single:
        out = reshape(out, (h, w, cout))
    return out


# -- reverse pass -----------------------------------------------------------


def backward(loss, wrt, create_graph=False):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Returns a list aligned with ``wrt``; leaves the loss does not depend
    on get zero gradients. With ``create_graph=True`` the returned
    gradients are themselves recorded nodes, so they can be
    differentiated again (used for second-order meta-updates).
    """
    loss = _as_tensor(loss)
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    wrt = list(wrt)
    if not wrt:
        return []

    # Reachable ancestors of the loss.
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)

    order = sorted(seen.values(), key=lambda t: t.seq)
    wrt_ids = {id(w) for w in wrt}

    # A node is needed if some wrt leaf is reachable from it.
    needed = set()
    for node in order:
        if id(node) in wrt_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    if id(loss) not in needed:
        return [zeros_like(w) for w in wrt]

    grads = {id(loss): ones_like(loss)}
    ctx = no_grad() if not create_graph else _nullctx()
    with ctx:
        for node in reversed(order):
            nid = id(node)
            if nid not in needed or nid not in grads:
                continue
            g = grads[nid]
            for p, vjp in zip(node.parents, node.vjps):
                if id(p) not in needed:
                    continue
                pg = vjp(g)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    return [grads.get(id(w)) if grads.get(id(w)) is not None else zeros_like(w) for w in wrt]


@contextmanager
def _nullctx():
    yield
