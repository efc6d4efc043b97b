"""Base spatial-temporal predictor: patch CNN -> LSTM -> bounded head.

Each training sample is a short window of grid patches centered on a
region. A shared CNN turns every patch into a spatial embedding, an
LSTM rolls those embeddings over the window, and a tanh regression head
maps the final hidden state to the (normalized, hence [-1, 1]) target.

The LSTM here follows the recurrence used throughout this package:
three sigmoid gates i/f/d plus a tanh candidate, cell
``c = f*c_prev + i*cand`` and hidden ``h = tanh(c) * d``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import stmem
from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .params import ParamSet

_GATES = ("i", "f", "d", "c")


@dataclass(frozen=True)
class StNetConfig:
    patch_size: int = 7
    channels: int = 2
    out_channels: int | None = None  # defaults to `channels`
    cnn_layers: int = 2
    cnn_filters: int = 64
    kernel_size: int = 3
    spatial_dim: int = 64
    lstm_hidden_dim: int = 128
    window_len: int = 8
    external_feature_dim: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.cnn_layers < 1:
            raise ConfigError("cnn_layers must be >= 1")
        for field in ("channels", "cnn_filters", "spatial_dim", "lstm_hidden_dim", "window_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")
        if self.external_feature_dim < 0:
            raise ConfigError("external_feature_dim must be >= 0")
        out = self.out_channels
        if out is not None and (out < 1 or out > self.channels):
            raise ConfigError(f"out_channels must be in [1, {self.channels}], got {out}")

    @property
    def target_channels(self):
        return self.channels if self.out_channels is None else self.out_channels

    @property
    def lstm_input_dim(self):
        return self.spatial_dim + self.external_feature_dim

    def to_dict(self):
        return {
            "patch_size": self.patch_size,
            "channels": self.channels,
            "out_channels": self.out_channels,
            "cnn_layers": self.cnn_layers,
            "cnn_filters": self.cnn_filters,
            "kernel_size": self.kernel_size,
            "spatial_dim": self.spatial_dim,
            "lstm_hidden_dim": self.lstm_hidden_dim,
            "window_len": self.window_len,
            "external_feature_dim": self.external_feature_dim,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown StNetConfig fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_window(self, window_len):
        return replace(self, window_len=window_len)


@dataclass
class TrainingSample:
    """One supervised example: a window of patches and the next value."""

    patches: np.ndarray  # [window, N, N, channels], normalized
    target: np.ndarray  # [target_channels], normalized
    region_id: int
    timestamp: int
    externals: np.ndarray | None = None  # [window, external_feature_dim]
    cluster_onehot: np.ndarray | None = None  # [G], set for source-city samples


class Batch:
    """Stacked samples; the unit the model actually consumes."""

    __slots__ = ("patches", "targets", "externals", "onehots", "region_ids", "timestamps")

    def __init__(self, patches, targets, externals=None, onehots=None, region_ids=None, timestamps=None):
        self.patches = patches
        self.targets = targets
        self.externals = externals
        self.onehots = onehots
        self.region_ids = region_ids
        self.timestamps = timestamps

    def __len__(self):
        return self.patches.shape[0]

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            raise DataError("cannot build a batch from zero samples")
        patches = np.stack([s.patches for s in samples])
        targets = np.stack([s.target for s in samples])
        externals = None
        if samples[0].externals is not None:
            externals = np.stack([s.externals for s in samples])
        onehots = None
        if samples[0].cluster_onehot is not None:
            onehots = np.stack([s.cluster_onehot for s in samples])
        region_ids = np.array([s.region_id for s in samples], dtype=np.int64)
        timestamps = np.array([s.timestamp for s in samples], dtype=np.int64)
        return cls(patches, targets, externals, onehots, region_ids, timestamps)

    def take(self, idx):
        return Batch(
            self.patches[idx],
            self.targets[idx],
            None if self.externals is None else self.externals[idx],
            None if self.onehots is None else self.onehots[idx],
            None if self.region_ids is None else self.region_ids[idx],
            None if self.timestamps is None else self.timestamps[idx],
        )


def _as_batch(batch_or_samples):
    if isinstance(batch_or_samples, Batch):
        return batch_or_samples
    return Batch.from_samples(batch_or_samples)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, memory_dim=None, rng=None, seed=0):
    """Fresh parameters; layout is fixed by the config.

    Dense weights are stored ``[in, out]`` (activations multiply them
    from the left). All weights and biases draw
    uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). When ``memory_dim`` is
    given the head takes ``[h; z]`` and a query projection is added;
    otherwise this is the plain predictor.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    out = []
    cin = config.channels
    k = config.kernel_size
    for q in range(config.cnn_layers):
        cout = config.cnn_filters
        fan = k * k * cin
        out.append((f"cnn{q}.W", T.param(_uniform(rng, (k, k, cin, cout), fan), name=f"cnn{q}.W")))
        out.append((f"cnn{q}.b", T.param(_uniform(rng, (cout,), fan), name=f"cnn{q}.b")))
        cin = cout
    flat = config.patch_size * config.patch_size * cin
    out.append(("spatial.W", T.param(_uniform(rng, (flat, config.spatial_dim), flat), name="spatial.W")))
    out.append(("spatial.b", T.param(_uniform(rng, (config.spatial_dim,), flat), name="spatial.b")))
    din = config.lstm_input_dim
    dh = config.lstm_hidden_dim
    for gate in _GATES:
        out.append((f"lstm.U_{gate}", T.param(_uniform(rng, (din, dh), din), name=f"lstm.U_{gate}")))
        out.append((f"lstm.W_{gate}", T.param(_uniform(rng, (dh, dh), dh), name=f"lstm.W_{gate}")))
        out.append((f"lstm.b_{gate}", T.param(_uniform(rng, (dh,), dh), name=f"lstm.b_{gate}")))
    head_in = dh
    if memory_dim is not None:
        out.append(("query.W", T.param(_uniform(rng, (dh, memory_dim), dh), name="query.W")))
        out.append(("query.b", T.param(_uniform(rng, (memory_dim,), dh), name="query.b")))
        head_in = dh + memory_dim
    v_out = config.target_channels
    out.append(("head.W", T.param(_uniform(rng, (head_in, v_out), head_in), name="head.W")))
    out.append(("head.b", T.param(_uniform(rng, (v_out,), head_in), name="head.b")))
    return ParamSet(out)


def linear(x, w, b):
    """x [B, din] @ w [din, dout] + b, broadcasting the bias over rows."""
    return T.add(T.matmul(x, w), b)


def _encode_batch(x, params, config):
    """CNN + flatten + FC for a stack of patches [M, N, N, C] -> [M, s]."""
    for q in range(config.cnn_layers):
        x = T.relu(T.conv2d(x, params[f"cnn{q}.W"], params[f"cnn{q}.b"]))
    m = x.shape[0]
    flat = T.reshape(x, (m, x.shape[1] * x.shape[2] * x.shape[3]))
    return linear(flat, params["spatial.W"], params["spatial.b"])


def cnn_encode(patch, params, config):
    """Spatial embedding of a single patch [N, N, C] -> [spatial_dim]."""
    patch = patch if isinstance(patch, T.Tensor) else T.Tensor(patch)
    if patch.ndim != 3:
        raise ShapeError(f"cnn_encode expects [N,N,C], got {patch.shape}")
    out = _encode_batch(T.reshape(patch, (1,) + patch.shape), params, config)
    return T.reshape(out, (out.shape[1],))


def _lstm_gate_stack(params):
    """Concatenate the four gate weight sets along the output axis.

    Hoisting this out of the time loop turns each step into two matrix
    products instead of eight; the recorded concat nodes are shared by
    every step of the window.
    """
    u = T.concat([params[f"lstm.U_{g}"] for g in _GATES], axis=1)
    w = T.concat([params[f"lstm.W_{g}"] for g in _GATES], axis=1)
    b = T.concat([params[f"lstm.b_{g}"] for g in _GATES], axis=0)
    return u, w, b


def _lstm_step_batch(s, h_prev, c_prev, stacked):
    u, w, b = stacked
    dh = h_prev.shape[1]
    pre = T.add(T.add(T.matmul(s, u), T.matmul(h_prev, w)), b)
    i = T.sigmoid(T.narrow(pre, 1, 0, dh))
    f = T.sigmoid(T.narrow(pre, 1, dh, dh))
    d = T.sigmoid(T.narrow(pre, 1, 2 * dh, dh))
    cand = T.tanh(T.narrow(pre, 1, 3 * dh, dh))
    c = T.add(T.mul(f, c_prev), T.mul(i, cand))
    h = T.mul(T.tanh(c), d)
    return h, c


def lstm_step(s, h_prev, c_prev, params):
    """One recurrence step on 1-D vectors; returns (h, c)."""
    s = s if isinstance(s, T.Tensor) else T.Tensor(s)
    h_prev = h_prev if isinstance(h_prev, T.Tensor) else T.Tensor(h_prev)
    c_prev = c_prev if isinstance(c_prev, T.Tensor) else T.Tensor(c_prev)
    s2 = T.reshape(s, (1, s.shape[0]))
    h2 = T.reshape(h_prev, (1, h_prev.shape[0]))
    c2 = T.reshape(c_prev, (1, c_prev.shape[0]))
    h, c = _lstm_step_batch(s2, h2, c2, _lstm_gate_stack(params))
    return T.reshape(h, (h.shape[1],)), T.reshape(c, (c.shape[1],))


def hidden_batch(batch, params, config):
    """Final LSTM hidden state for every sample in the batch: [B, dh]."""
    batch = _as_batch(batch)
    b, w, n, n2, ch = batch.patches.shape
    if w != config.window_len:
        raise ShapeError(f"batch window {w} != config window_len {config.window_len}")
    if n != config.patch_size or n2 != config.patch_size or ch != config.channels:
        raise ShapeError(
            f"batch patches {(n, n2, ch)} incompatible with config "
            f"({config.patch_size}, {config.patch_size}, {config.channels})"
        )
    x = T.Tensor(batch.patches.reshape(b * w, n, n, ch))
    s = _encode_batch(x, params, config)
    if config.external_feature_dim:
        if batch.externals is None:
            raise DataError("config expects external features but the batch has none")
        e = T.Tensor(batch.externals.reshape(b * w, config.external_feature_dim))
        s = T.concat([s, e], axis=1)
    seq = T.reshape(s, (b, w, config.lstm_input_dim))
    h = T.zeros((b, config.lstm_hidden_dim))
    c = T.zeros((b, config.lstm_hidden_dim))
    stacked = _lstm_gate_stack(params)
    for t in range(w):
        st = T.reshape(T.narrow(seq, 1, t, 1), (b, config.lstm_input_dim))
        h, c = _lstm_step_batch(st, h, c, stacked)
    return h


def forward_batch(batch, params, config, memory=None):
    """Predictions and final hidden states: ([B, v_out], [B, dh])."""
    batch = _as_batch(batch)
    h = hidden_batch(batch, params, config)
    if memory is None:
        pred = T.tanh(linear(h, params["head.W"], params["head.b"]))
    else:
        pred = stmem.predict_enhanced(h, memory, params)
    return pred, h


def forward(sample, params, config, memory=None):
    """Single-sample convenience wrapper; returns (prediction, hidden)."""
    pred, h = forward_batch(Batch.from_samples([sample]), params, config, memory)
    return T.reshape(pred, (pred.shape[1],)), T.reshape(h, (h.shape[1],))


def mse_loss(batch, params, config, memory=None):
    """Mean over the batch of the squared error summed over channels."""
    batch = _as_batch(batch)
    pred, _ = forward_batch(batch, params, config, memory)
    diff = T.sub(pred, T.Tensor(batch.targets))
    return T.scale(T.sum(T.square(diff)), 1.0 / len(batch))


def predict(batch, params, config, memory=None):
    """Numpy predictions with recording off (no graph, no gradients)."""
    with T.no_grad():
        pred, _ = forward_batch(batch, params, config, memory)
    return pred.data


class StNetModel:
    """Bundles the architecture config with optional memory dimensions.

    This is the adapter the meta-learner drives: ``loss`` for inner and
    fine-tuning steps, ``query_loss`` for the outer objective. With
    ``memory_dim=None`` the exact same code paths run the plain
    predictor, which is what the initialization-only baseline uses.
    """

    def __init__(self, config, memory_patterns=None, memory_dim=None):
        if (memory_patterns is None) != (memory_dim is None):
            raise ConfigError("memory_patterns and memory_dim must be given together")
        self.config = config
        self.memory_patterns = memory_patterns
        self.memory_dim = memory_dim

    @property
    def use_memory(self):
        return self.memory_dim is not None

    def init_params(self, rng=None, seed=0):
        return init_params(self.config, memory_dim=self.memory_dim, rng=rng, seed=seed)

    def init_memory(self, rng=None, seed=0):
        if not self.use_memory:
            return None
        return stmem.PatternMemory.create(self.memory_patterns, self.memory_dim, rng=rng, seed=seed)

    def loss(self, params, batch, memory=None):
        return mse_loss(batch, params, self.config, memory)

    def query_loss(self, params, batch, memory=None, gamma=0.0):
        """(total, mse value, clustering value); one forward pass."""
        batch = _as_batch(batch)
        h = hidden_batch(batch, params, self.config)
        if memory is None:
            pred = T.tanh(linear(h, params["head.W"], params["head.b"]))
        else:
            p, z = stmem.read(h, memory, params)
            pred = stmem.enhanced_head(h, z, params)
        diff = T.sub(pred, T.Tensor(batch.targets))
        mse = T.scale(T.sum(T.square(diff)), 1.0 / len(batch))
        if memory is None or gamma == 0.0:
            return mse, mse.item(), 0.0
        if batch.onehots is None:
            raise DataError("clustering term requested but batch carries no cluster labels")
        clu = stmem.clustering_loss_from_scores(p, T.Tensor(batch.onehots))
        total = T.add(mse, T.scale(clu, gamma))
        return total, mse.item(), clu.item()

    def predict(self, params, batch, memory=None):
        return predict(batch, params, self.config, memory)

    def attention(self, params, batch, memory):
        """Attention weights over memory patterns, [B, G], no graph."""
        with T.no_grad():
            h = hidden_batch(batch, params, self.config)
            p, _ = stmem.read(h, memory, params)
        return p.data
