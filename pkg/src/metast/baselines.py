"""Reference predictors: historical average, small AR, pretrain+fine-tune.

These set the floor (and sanity ceiling) for the learned models. All
run on raw series values; the neural fine-tuning baselines reuse the
exact model, optimizer, and adaptation budget of the meta-learned
system so comparisons isolate the initialization strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .meta import adapt_to_target
from .params import Adam, grad_params
from .stnet import Batch

# -- historical average -------------------------------------------------------


@dataclass
class HistoricalAverage:
    """Per-(phase, region, channel) train means with region-mean fallback."""

    means: np.ndarray  # [period, rows, cols, v]
    seen: np.ndarray  # [period] bool, phase observed in train
    fallback: np.ndarray  # [rows, cols, v] overall train mean
    period: int
    used_fallback: bool

    def predict_phase(self, phase):
        if self.seen[phase]:
            return self.means[phase]
        return self.fallback


def ha_fit(series, train_end):
    """Average raw volume per phase over the training span."""
    if train_end < 1 or train_end > series.T:
        raise DataError(f"ha_fit train_end {train_end} outside series of length {series.T}")
    period = series.period
    phases = np.asarray(series.phases(0, train_end))
    train = series.values[:train_end]
    means = np.zeros((period,) + train.shape[1:])
    seen = np.zeros(period, dtype=bool)
    for ph in range(period):
        sel = phases == ph
        if np.any(sel):
            means[ph] = train[sel].mean(axis=0)
            seen[ph] = True
    fallback = train.mean(axis=0)
    return HistoricalAverage(means, seen, fallback, period, used_fallback=not seen.all())


def ha_predict(series, train_end, t):
    """Historical-average forecast of interval ``t``: [rows, cols, v]."""
    model = ha_fit(series, train_end)
    return model.predict_phase(series.phase(t))


def ha_forecast(series, train_end):
    """Forecasts for every test interval: [T - train_end, rows, cols, v]."""
    model = ha_fit(series, train_end)
    return np.stack([model.predict_phase(series.phase(t)) for t in range(train_end, series.T)])


# -- autoregression with optional differencing --------------------------------


@dataclass
class ARModel:
    coef: np.ndarray  # [p] lag coefficients, lag-1 first
    intercept: float
    p: int
    q: int  # 0 or 1: differencing order
    ridge_used: bool


def ar_fit(x, p=3, q=1, ridge=1e-6):
    """Least-squares AR(p) on the (optionally differenced) series.

    Solves the normal equations directly; if they are singular the
    solve falls back to a ridge-regularized system and flags it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"ar_fit expects a 1-D series, got shape {x.shape}")
    if q not in (0, 1):
        raise DataError(f"ar_fit supports q in (0, 1), got {q}")
    if p < 1:
        raise DataError("ar_fit needs p >= 1")
    z = np.diff(x) if q else x
    n_rows = z.size - p
    if n_rows < 1:
        raise DataError(f"series too short for AR({p}) with q={q}: {x.size} points")
    cols = [np.ones(n_rows)]
    for k in range(1, p + 1):
        cols.append(z[p - k : p - k + n_rows])
    X = np.stack(cols, axis=1)
    y = z[p:]
    A = X.T @ X
    b = X.T @ y
    ridge_used = False
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-10 or not np.isfinite(sv).all():
        A = A + ridge * np.eye(A.shape[0])
        ridge_used = True
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        beta = np.linalg.solve(A + ridge * np.eye(A.shape[0]), b)
        ridge_used = True
    return ARModel(coef=beta[1:], intercept=float(beta[0]), p=p, q=q, ridge_used=ridge_used)


def ar_predict_next(model, history):
    """One-step-ahead forecast from the raw history tail."""
    history = np.asarray(history, dtype=np.float64)
    need = model.p + model.q
    if history.size < need:
        raise DataError(f"need {need} history points, got {history.size}")
    z = np.diff(history) if model.q else history
    lags = z[-model.p :][::-1]  # lag-1 first
    z_hat = model.intercept + float(model.coef @ lags)
    return z_hat + history[-1] if model.q else z_hat


def ar_forecast(x, train_end, p=3, q=1):
    """Rolling one-step forecasts over the test span using true lags."""
    x = np.asarray(x, dtype=np.float64)
    if train_end >= x.size:
        raise DataError("ar_forecast: empty test span")
    model = ar_fit(x[:train_end], p=p, q=q)
    return model, np.array(
        [ar_predict_next(model, x[:t]) for t in range(train_end, x.size)]
    )


def ar_forecast_grid(series, train_end, p=3, q=1):
    """Per-region, per-channel rolling AR forecasts: [T-train_end, I, J, v]."""
    out = np.zeros((series.T - train_end,) + series.values.shape[1:])
    any_ridge = False
    for i in range(series.rows):
        for j in range(series.cols):
            for c in range(series.n_channels):
                model, preds = ar_forecast(series.values[:, i, j, c], train_end, p=p, q=q)
                out[:, i, j, c] = preds
                any_ridge |= model.ridge_used
    return out, any_ridge


# -- neural fine-tuning baselines ---------------------------------------------


def _concat_batches(parts):
    return Batch(
        np.concatenate([p.patches for p in parts]),
        np.concatenate([p.targets for p in parts]),
        externals=None if parts[0].externals is None else np.concatenate([p.externals for p in parts]),
        onehots=None if parts[0].onehots is None else np.concatenate([p.onehots for p in parts]),
        region_ids=np.concatenate([p.region_ids for p in parts]),
        timestamps=np.concatenate([p.timestamps for p in parts]),
    )


def pooled_batch(cities, rng, size):
    """One batch drawn from the union of the cities' training pools."""
    sizes = np.array([c.span_size("train") for c in cities], dtype=np.float64)
    counts = rng.multinomial(size, sizes / sizes.sum())
    parts = [c.sample_batch(rng, "train", int(k)) for c, k in zip(cities, counts) if k > 0]
    return _concat_batches(parts)


def fine_tune(model, source_cities, target_train, cfg, seed=0, pretrain_steps=0):
    """Pretrain on pooled source data, then adapt on the target city.

    Pretraining uses Adam at the outer learning rate; adaptation is the
    exact ``adapt_to_target`` the meta-learned system uses (same step
    budget, batch size, and learning rate), so the only difference
    between baselines and the meta-learned system is where the initial
    parameters came from. A single source city makes the pooled draw
    degenerate, so "multi" with one city is bitwise "single".

    Zero pretraining steps plus zero adaptation steps returns the
    untouched random initialization.
    """
    root = np.random.SeedSequence(seed)
    init_ss, sample_ss, adapt_ss = root.spawn(3)
    theta = model.init_params(rng=np.random.default_rng(init_ss))
    if pretrain_steps and not source_cities:
        raise DataError("pretraining requested without source cities")
    rng = np.random.default_rng(sample_ss)
    opt = Adam(cfg.outer_lr)
    for _ in range(pretrain_steps):
        batch = pooled_batch(source_cities, rng, cfg.task_batch_size)
        loss = model.loss(theta, batch, None)
        grads = grad_params(loss, theta)
        theta = opt.step(theta, grads)
    adapt_seed = int(np.random.default_rng(adapt_ss).integers(2**31))
    return adapt_to_target(model, theta, None, target_train, cfg, seed=adapt_seed)
