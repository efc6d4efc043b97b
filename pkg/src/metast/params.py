"""Named parameter collections, SGD/Adam steps, and checkpoint files.

Checkpoint layout (all integers little-endian, payload little-endian
float64, entries in insertion order):

    magic "MSTT" | u32 version | u32 count |
    per tensor: u32 name_len | name utf-8 | u32 rank | rank * u64 dims | data

The format is intentionally dumb: lossless for float64, trivially
diffable byte-for-byte, and readable without this package.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError

MAGIC = b"MSTT"
VERSION = 1


class ParamSet:
    """An ordered name -> Tensor mapping for trainable parameters."""

    def __init__(self, items):
        if isinstance(items, Mapping):
            items = items.items()
        self._d = {}
        for name, t in items:
            if name in self._d:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._d[name] = t if isinstance(t, T.Tensor) else T.Tensor(t)

    def __getitem__(self, name):
        return self._d[name]

    def __contains__(self, name):
        return name in self._d

    def __len__(self):
        return len(self._d)

    def __iter__(self):
        return iter(self._d)

    def names(self):
        return list(self._d)

    def items(self):
        return self._d.items()

    def values(self):
        return self._d.values()

    def detach(self, requires_grad=True):
        """Same values as fresh leaves, cut from any recorded graph."""
        return ParamSet((n, t.detach(requires_grad=requires_grad)) for n, t in self.items())

    def clone(self, requires_grad=True):
        """Deep copy of the values as fresh leaves."""
        return ParamSet(
            (n, T.Tensor(t.data.copy(), requires_grad=requires_grad, name=n))
            for n, t in self.items()
        )

    def n_values(self):
        return int(np.sum([t.data.size for t in self.values()])) if self._d else 0

    def to_arrays(self):
        return {n: t.data for n, t in self.items()}

    def data_bytes(self):
        """Concatenated raw values; handy for bitwise-equality checks."""
        return b"".join(t.data.astype("<f8").tobytes(order="C") for t in self.values())

    def __repr__(self):
        return f"ParamSet({len(self._d)} tensors, {self.n_values()} values)"


def sgd_step(params, grads, lr):
    """One gradient step, returning a new ParamSet.

    The update is expressed with recorded ops, so when the gradients
    carry a graph the returned parameters stay differentiable with
    respect to the originals. ``lr=0`` reproduces the inputs bitwise.
    """
    if set(params.names()) != set(grads):
        missing = set(params.names()) ^ set(grads)
        raise ConfigError(f"sgd_step params/grads key mismatch: {sorted(missing)}")
    out = []
    for name, t in params.items():
        g = grads[name]
        if g.data.shape != t.data.shape:
            raise ConfigError(
                f"gradient shape {g.data.shape} != param shape {t.data.shape} for {name!r}"
            )
        out.append((name, T.sub(t, T.scale(g, lr))))
    return ParamSet(out)


def grad_params(loss, params, create_graph=False):
    """Gradients of a scalar loss for every tensor in ``params``."""
    names = params.names()
    gs = T.backward(loss, [params[n] for n in names], create_graph=create_graph)
    return dict(zip(names, gs))


class Adam:
    """Adam with bias correction; state keyed by parameter name.

    Steps are pure functions of (params, grads, internal state), so a
    fixed seed and data stream reproduce runs bitwise.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        if set(params.names()) != set(grads):
            missing = set(params.names()) ^ set(grads)
            raise ConfigError(f"Adam params/grads key mismatch: {sorted(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        out = []
        for name, t in params.items():
            g = grads[name].data
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out.append((name, T.param(t.data - self.lr * upd, name=name)))
        return ParamSet(out)


# -- checkpoint I/O ----------------------------------------------------------


def to_checkpoint_bytes(tensors):
    """Serialize a name -> array/Tensor mapping (insertion order kept)."""
    if isinstance(tensors, ParamSet):
        tensors = tensors.to_arrays()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, T.Tensor) else np.asarray(value, dtype=np.float64)
        # note: ascontiguousarray would promote rank-0 to rank-1; tobytes
        # below already emits C order, so only the dtype needs forcing
        arr = arr.astype(np.float64, copy=False)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def from_checkpoint_bytes(blob):
    """Parse checkpoint bytes into an ordered name -> ndarray dict."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    off = 4
    version, count = struct.unpack_from("<II", view, off)
    off += 8
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", view, off) if rank else ()
            off += 8 * rank
            n = 1
            for d in dims:
                n *= d
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(view):
        raise DataError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(to_checkpoint_bytes(tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_checkpoint_bytes(fh.read())


def paramset_from_arrays(arrays):
    return ParamSet((n, T.param(a, name=n)) for n, a in arrays.items())
