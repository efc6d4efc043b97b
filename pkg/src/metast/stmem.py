"""Pattern memory: a small table of learned prototypes read by attention.

The memory ``M`` is a [G, d] matrix shared across cities. A hidden
state is projected to a d-dimensional query, dot products against the
rows are softmaxed into weights ``p``, and the read vector ``z`` is the
weighted row combination. During source training a cross-entropy term
pulls ``p`` toward each region's cluster label; during adaptation the
memory is held fixed and only read.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


class PatternMemory:
    """[G, d] prototype rows plus a trainability flag."""

    __slots__ = ("M", "trainable")

    def __init__(self, M, trainable=True):
        M = M if isinstance(M, T.Tensor) else T.param(M, name="st_mem.M")
        if M.ndim != 2:
            raise ShapeError(f"memory must be [G, d], got {M.shape}")
        self.M = M
        self.trainable = bool(trainable)

    @property
    def n_patterns(self):
        return self.M.shape[0]

    @property
    def dim(self):
        return self.M.shape[1]

    @classmethod
    def create(cls, n_patterns, dim, rng=None, seed=0, init_scale=0.1):
        if n_patterns < 1 or dim < 1:
            raise ConfigError(f"memory dims must be positive, got G={n_patterns} d={dim}")
        if rng is None:
            rng = np.random.default_rng(seed)
        M = rng.uniform(-init_scale, init_scale, size=(n_patterns, dim))
        return cls(T.param(M, name="st_mem.M"))

    def frozen(self):
        """Read-only view used during adaptation; values shared, no grads."""
        return PatternMemory(self.M.detach(requires_grad=False), trainable=False)

    def clone(self):
        return PatternMemory(
            T.param(self.M.data.copy(), name="st_mem.M"), trainable=self.trainable
        )

    def data_bytes(self):
        return self.M.data.astype("<f8").tobytes(order="C")


def project_query(h, params):
    """Project hidden states onto the memory space: [*, dh] -> [*, d]."""
    h = h if isinstance(h, T.Tensor) else T.Tensor(h)
    single = h.ndim == 1
    h2 = T.reshape(h, (1, h.shape[0])) if single else h
    v = T.add(T.matmul(h2, params["query.W"]), params["query.b"])
    return T.reshape(v, (v.shape[1],)) if single else v


def attend(v, memory):
    """Softmax attention over memory rows.

    Returns ``(p, z)`` where ``p`` are simplex weights over the G
    patterns and ``z = p @ M`` is the read vector. Scores are plain dot
    products; a uniform score row yields exactly uniform weights.
    """
    v = v if isinstance(v, T.Tensor) else T.Tensor(v)
    single = v.ndim == 1
    v2 = T.reshape(v, (1, v.shape[0])) if single else v
    if v2.shape[1] != memory.dim:
        raise ShapeError(f"query dim {v2.shape[1]} != memory dim {memory.dim}")
    scores = T.matmul(v2, T.transpose(memory.M))
    p = T.softmax(scores, axis=1)
    z = T.matmul(p, memory.M)
    if single:
        return T.reshape(p, (p.shape[1],)), T.reshape(z, (z.shape[1],))
    return p, z


def read(h, memory, params):
    """Hidden states -> (attention weights, read vectors)."""
    return attend(project_query(h, params), memory)


def enhanced_head(h, z, params):
    """tanh regression head on the concatenated [h; z] features."""
    hz = T.concat([h, z], axis=-1 if h.ndim == 1 else 1)
    single = hz.ndim == 1
    hz2 = T.reshape(hz, (1, hz.shape[0])) if single else hz
    out = T.tanh(T.add(T.matmul(hz2, params["head.W"]), params["head.b"]))
    return T.reshape(out, (out.shape[1],)) if single else out


def predict_enhanced(h, memory, params):
    """Memory-augmented prediction from hidden states."""
    _, z = read(h, memory, params)
    return enhanced_head(h, z, params)


def clustering_loss_from_scores(p, onehots):
    """Mean cross-entropy between attention weights and cluster labels.

    ``p`` and ``onehots`` are [B, G]; the log argument is clamped at
    1e-12 so an exactly-zero weight cannot produce an infinity.
    """
    p = p if isinstance(p, T.Tensor) else T.Tensor(p)
    onehots = onehots if isinstance(onehots, T.Tensor) else T.Tensor(onehots)
    if p.shape != onehots.shape:
        raise ShapeError(f"scores {p.shape} vs labels {onehots.shape}")
    ce = T.neg(T.sum(T.mul(onehots, T.log(p))))
    return T.scale(ce, 1.0 / p.shape[0])


def clustering_loss(batch, params, memory, config):
    """Batch-level clustering alignment loss (runs the encoder)."""
    from . import stnet  # local import: stnet depends on this module

    batch = stnet._as_batch(batch)
    if batch.onehots is None:
        raise ConfigError("clustering_loss needs samples with cluster labels attached")
    if batch.onehots.shape[1] != memory.n_patterns:
        raise ShapeError(
            f"labels over {batch.onehots.shape[1]} clusters vs memory with {memory.n_patterns}"
        )
    h = stnet.hidden_batch(batch, params, config)
    p, _ = read(h, memory, params)
    return clustering_loss_from_scores(p, T.Tensor(batch.onehots))
