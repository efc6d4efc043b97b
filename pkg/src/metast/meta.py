"""Bilevel meta-training across source cities and target-city transfer.

The inner loop adapts a copy of the shared initialization to one city
with a few SGD steps on support data; the outer loop scores the adapted
parameters on held-out query data (prediction error plus, when a
pattern memory is present, the cluster-alignment term) and updates the
initialization and the memory.

    theta_c = theta0 - alpha * dL_support/dtheta0        (repeated)
    outer   = sum_c [ query_mse(theta_c) + gamma * clu(theta_c) ]

With ``second_order=True`` the inner update is recorded, so outer
gradients differentiate through it. With ``second_order=False`` the
inner gradients are treated as constants (the update step itself still
links theta_c to theta0 with an identity Jacobian), which is the usual
cheap approximation. Both paths share all code.

The model argument is anything exposing ``init_params``,
``init_memory``, ``loss(params, batch, memory)`` and
``query_loss(params, batch, memory, gamma)``; tests exercise the
machinery on closed-form toy models through the same interface.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .params import Adam, ParamSet, grad_params, save_checkpoint, sgd_step
from .stnet import Batch

MEMORY_KEY = "st_mem.M"


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 1e-3
    inner_steps: int = 5
    meta_batch_cities: int = 3
    task_batch_size: int = 128
    max_meta_iters: int = 20000
    gamma: float = 1e-4
    second_order: bool = True
    meta_optimizer: str = "sgd"  # "sgd" | "adam"
    adapt_steps: int = 200
    adapt_lr: float | None = None  # defaults to inner_lr
    adapt_batch_size: int | None = None  # defaults to task_batch_size
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 1

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.inner_steps < 0 or self.adapt_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.meta_batch_cities < 1 or self.task_batch_size < 1:
            raise ConfigError("meta_batch_cities and task_batch_size must be >= 1")
        if self.max_meta_iters < 0:
            raise ConfigError("max_meta_iters must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown meta_optimizer {self.meta_optimizer!r}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown MetaConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class TaskSplit:
    """Support/query data for one city within one meta-iteration."""

    city_id: str
    support: object  # Batch or list[TrainingSample]
    query: object

    def validate(self):
        s = self.support if isinstance(self.support, Batch) else Batch.from_samples(self.support)
        q = self.query if isinstance(self.query, Batch) else Batch.from_samples(self.query)
        if len(s) == 0 or len(q) == 0:
            raise DataError(f"task for {self.city_id} has an empty side")
        if s.timestamps is not None and q.timestamps is not None:
            if np.intersect1d(s.timestamps, q.timestamps).size:
                raise DataError(f"task for {self.city_id}: support/query share timestamps")
        return self


def inner_adapt(model, theta0, support, memory, cfg):
    """City-level adaptation: ``inner_steps`` SGD steps on support data.

    The memory is read but never updated here. The returned parameters
    remain functions of ``theta0`` on the recorded graph.
    """
    theta = theta0
    for _ in range(cfg.inner_steps):
        loss = model.loss(theta, support, memory)
        grads = grad_params(loss, theta, create_graph=cfg.second_order)
        theta = sgd_step(theta, grads, cfg.inner_lr)
    return theta


def outer_loss(model, theta0, memory, tasks, cfg):
    """Meta-objective over a batch of tasks; returns (loss, metrics)."""
    if not tasks:
        raise DataError("outer_loss needs at least one task")
    total = None
    mse_sum = 0.0
    clu_sum = 0.0
    for task in tasks:
        theta_c = inner_adapt(model, theta0, task.support, memory, cfg)
        task_loss, mse_val, clu_val = model.query_loss(
            theta_c, task.query, memory, gamma=cfg.gamma
        )
        total = task_loss if total is None else total + task_loss
        mse_sum += mse_val
        clu_sum += clu_val
    metrics = {"mse": mse_sum, "clu": clu_sum, "n_tasks": len(tasks)}
    return total, metrics


def meta_grads(model, theta0, memory, tasks, cfg):
    """Gradient of the meta-objective wrt theta0 (and the memory)."""
    loss, metrics = outer_loss(model, theta0, memory, tasks, cfg)
    metrics["loss"] = loss.item()
    train_memory = memory is not None and memory.trainable
    if train_memory:
        combined = ParamSet(list(theta0.items()) + [(MEMORY_KEY, memory.M)])
    else:
        combined = theta0
    grads = grad_params(loss, combined)
    return grads, metrics


def meta_step(model, theta0, memory, tasks, cfg, optimizer=None):
    """One outer update. Returns (theta0', memory', metrics).

    ``optimizer=None`` means plain SGD with ``outer_lr``. The inputs are
    never mutated; a zero learning rate reproduces them exactly.
    """
    grads, metrics = meta_grads(model, theta0, memory, tasks, cfg)
    train_memory = memory is not None and memory.trainable
    if train_memory:
        combined = ParamSet(list(theta0.items()) + [(MEMORY_KEY, memory.M)])
    else:
        combined = theta0
    if optimizer is None:
        updated = sgd_step(combined, grads, cfg.outer_lr).detach(requires_grad=True)
    else:
        updated = optimizer.step(combined, grads)
    new_theta = ParamSet((n, updated[n]) for n in theta0.names())
    new_memory = memory
    if train_memory:
        new_memory = type(memory)(updated[MEMORY_KEY], trainable=True)
    return new_theta, new_memory, metrics


def sample_tasks(cities, cfg, rng):
    """Draw the per-iteration city batch and their support/query batches."""
    n = len(cities)
    if n == 0:
        raise DataError("no source cities to sample tasks from")
    if n <= cfg.meta_batch_cities:
        chosen = list(range(n))
    else:
        chosen = sorted(rng.choice(n, size=cfg.meta_batch_cities, replace=False).tolist())
    tasks = []
    for ci in chosen:
        city = cities[ci]
        support = city.sample_batch(rng, "train", cfg.task_batch_size)
        query = city.sample_batch(rng, "query", cfg.task_batch_size)
        tasks.append(TaskSplit(city.city_id, support, query))
    return tasks


def meta_train(model, cities, cfg, seed=0, log_path=None, checkpoint_path=None):
    """Full meta-training loop. Returns (theta0, memory, log rows).

    Deterministic given (model, cities, cfg, seed). The loss log has
    one row per ``log_every`` iterations; wall-clock columns are the
    only nondeterministic fields and are excluded from any comparison.
    """
    root = np.random.SeedSequence(seed)
    init_ss, sample_ss = root.spawn(2)
    init_rng = np.random.default_rng(init_ss)
    sample_rng = np.random.default_rng(sample_ss)

    theta = model.init_params(rng=init_rng)
    memory = model.init_memory(rng=init_rng)
    optimizer = Adam(cfg.outer_lr) if cfg.meta_optimizer == "adam" else None

    log = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "mse", "clu", "wall_ms"])
    t_start = time.perf_counter()
    try:
        for it in range(cfg.max_meta_iters):
            tasks = sample_tasks(cities, cfg, sample_rng)
            theta, memory, metrics = meta_step(model, theta, memory, tasks, cfg, optimizer)
            if cfg.log_every and it % cfg.log_every == 0:
                row = {
                    "iter": it,
                    "loss": metrics["loss"],
                    "mse": metrics["mse"],
                    "clu": metrics["clu"],
                    "wall_ms": (time.perf_counter() - t_start) * 1e3,
                }
                log.append(row)
                if writer is not None:
                    writer.writerow([row["iter"], row["loss"], row["mse"], row["clu"],
                                     f"{row['wall_ms']:.1f}"])
            if (
                checkpoint_path is not None
                and cfg.checkpoint_every
                and (it + 1) % cfg.checkpoint_every == 0
            ):
                save_meta_checkpoint(checkpoint_path, theta, memory)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_meta_checkpoint(checkpoint_path, theta, memory)
    return theta, memory, log


def save_meta_checkpoint(path, theta, memory):
    tensors = dict(theta.to_arrays())
    if memory is not None:
        tensors[MEMORY_KEY] = memory.M.data
    save_checkpoint(path, tensors)


def adapt_to_target(model, theta0, memory, target_train, cfg, seed=0):
    """Fine-tune the meta-initialization on target-city training data.

    Runs ``adapt_steps`` SGD steps over shuffled mini-batches. The
    pattern memory is frozen: it is read through attention but receives
    no updates, byte-for-byte. Zero steps returns theta0 unchanged.
    """
    frozen = memory.frozen() if memory is not None else None
    batch_full = target_train if isinstance(target_train, Batch) else Batch.from_samples(target_train)
    n = len(batch_full)
    if n == 0:
        raise DataError("adapt_to_target got an empty training set")
    lr = cfg.inner_lr if cfg.adapt_lr is None else cfg.adapt_lr
    bs = min(cfg.adapt_batch_size or cfg.task_batch_size, n)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = theta0.detach(requires_grad=True)
    order = rng.permutation(n)
    pos = 0
    for _ in range(cfg.adapt_steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        loss = model.loss(theta, batch_full.take(idx), frozen)
        grads = grad_params(loss, theta)
        theta = sgd_step(theta, grads, lr).detach(requires_grad=True)
    return theta
