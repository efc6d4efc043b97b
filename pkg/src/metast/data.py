"""Grid time series: ingestion, normalization, sampling, synthesis.

Everything downstream consumes a ``GridSeries``: a dense
``[T, rows, cols, channels]`` float64 array of raw per-interval volumes
plus the per-channel min/max fitted on the training span. Values are
trained and predicted in the normalized [-1, 1] space and converted
back to raw units only for reporting.

``CityDataset`` wraps one series with its split point, optional ground
truth archetypes (synthetic data keeps them for evaluation), cluster
assignments, and fast batch gathering for the training loops.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .clustering import ClusterAssignment
from .errors import ConfigError, DataError
from .params import load_checkpoint, save_checkpoint
from .stnet import Batch, TrainingSample

PERIOD_BY_INTERVAL = {"hour": 24, "month": 12}
TARGET_SPLIT_DAYS = {"target-1": 1, "target-3": 3, "target-7": 7}


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError(f"degenerate bounding box {self}")

    def cell(self, lat, lon, rows, cols):
        """Grid cell for a coordinate, or None when outside the box."""
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        i = int((lat - self.lat_min) / (self.lat_max - self.lat_min) * rows)
        j = int((lon - self.lon_min) / (self.lon_max - self.lon_min) * cols)
        return min(i, rows - 1), min(j, cols - 1)


@dataclass
class TripRecord:
    pickup_time: int  # epoch seconds
    pickup_lat: float
    pickup_lon: float
    dropoff_time: int | None = None
    dropoff_lat: float | None = None
    dropoff_lon: float | None = None


def _month_index(ts):
    d = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    return d.year * 12 + (d.month - 1)


@dataclass
class GridSeries:
    city_id: str
    rows: int
    cols: int
    interval: str  # "hour" | "month"
    t0: int  # epoch seconds of interval 0
    values: np.ndarray  # [T, rows, cols, channels], raw units
    channel_names: tuple = ()
    norm: np.ndarray | None = None  # [channels, 2] (min, max) over train span
    mask: np.ndarray | None = None  # optional [T, rows, cols] observation flags

    def __post_init__(self):
        if self.interval not in PERIOD_BY_INTERVAL:
            raise ConfigError(f"unknown interval {self.interval!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[1] != self.rows or v.shape[2] != self.cols:
            raise DataError(f"values shape {v.shape} != [T, {self.rows}, {self.cols}, v]")
        self.values = v
        if not self.channel_names:
            self.channel_names = tuple(f"ch{k}" for k in range(v.shape[3]))

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[3]

    @property
    def n_regions(self):
        return self.rows * self.cols

    @property
    def period(self):
        return PERIOD_BY_INTERVAL[self.interval]

    def phase(self, t):
        """Phase of interval ``t``: hour-of-day or month-of-year."""
        if self.interval == "hour":
            return int((self.t0 // 3600 + t) % 24)
        return int((_month_index(self.t0) + t) % 12)

    def phases(self, t_start=0, t_end=None):
        t_end = self.T if t_end is None else t_end
        base = (self.t0 // 3600) if self.interval == "hour" else _month_index(self.t0)
        return (base + np.arange(t_start, t_end)) % self.period

    def normalized(self):
        if self.norm is None:
            raise DataError("series has no fitted normalization")
        lo = self.norm[:, 0]
        hi = self.norm[:, 1]
        rng = hi - lo
        safe = np.where(rng > 0, rng, 1.0)
        out = 2.0 * (self.values - lo) / safe - 1.0
        return np.where(rng > 0, out, 0.0)

    def with_norm(self, norm):
        return GridSeries(
            self.city_id, self.rows, self.cols, self.interval, self.t0,
            self.values, self.channel_names, np.asarray(norm, dtype=np.float64), self.mask,
        )

    def save(self, path_base):
        """Write ``{base}.mstt`` (arrays) plus ``{base}.json`` (metadata)."""
        tensors = {"grid.values": self.values}
        if self.mask is not None:
            tensors["grid.mask"] = self.mask.astype(np.float64)
        save_checkpoint(path_base + ".mstt", tensors)
        meta = {
            "city_id": self.city_id,
            "rows": self.rows,
            "cols": self.cols,
            "interval": self.interval,
            "t0": self.t0,
            "channel_names": list(self.channel_names),
            "norm": None if self.norm is None else self.norm.tolist(),
        }
        with open(path_base + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_base):
        arrays = load_checkpoint(path_base + ".mstt")
        if "grid.values" not in arrays:
            raise DataError(f"{path_base}.mstt holds no 'grid.values' tensor")
        with open(path_base + ".json") as fh:
            meta = json.load(fh)
        return cls(
            city_id=meta["city_id"],
            rows=meta["rows"],
            cols=meta["cols"],
            interval=meta["interval"],
            t0=meta["t0"],
            values=arrays["grid.values"],
            channel_names=tuple(meta["channel_names"]),
            norm=None if meta["norm"] is None else np.asarray(meta["norm"], dtype=np.float64),
            mask=arrays.get("grid.mask"),
        )


def fit_norm(series, train_len=None):
    """Per-channel (min, max) over the training prefix."""
    t = series.T if train_len is None else int(train_len)
    if t < 1 or t > series.T:
        raise DataError(f"train_len {t} outside [1, {series.T}]")
    window = series.values[:t]
    return np.stack(
        [np.array([window[..., c].min(), window[..., c].max()]) for c in range(series.n_channels)]
    )


def normalize(series, train_len=None):
    """Fit min-max on the train prefix; constant channels map to 0."""
    return series.with_norm(fit_norm(series, train_len))


def denormalize(arr, norm, channels=None):
    """Inverse of the [-1, 1] mapping; constant channels return their min."""
    arr = np.asarray(arr, dtype=np.float64)
    norm = np.asarray(norm, dtype=np.float64)
    if channels is not None:
        norm = norm[list(channels)]
    lo = norm[:, 0]
    hi = norm[:, 1]
    rng = hi - lo
    return np.where(rng > 0, (arr + 1.0) * 0.5 * rng + lo, lo)


def split(series, mode):
    """Train/test spans: ((0, k), (k, T)).

    ``source`` takes the first 80% of intervals. ``target-N`` keeps the
    first N days (hourly) or N years (monthly) for adaptation.
    """
    total = series.T
    if mode == "source":
        k = int(total * 0.8)
    elif mode in TARGET_SPLIT_DAYS:
        per_day = 24 if series.interval == "hour" else 12
        k = TARGET_SPLIT_DAYS[mode] * per_day
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    if k < 1 or k >= total:
        raise DataError(f"split {mode!r} needs more than {k} intervals, series has {total}")
    return (0, k), (k, total)


def make_samples(series, window, patch_size, span=None, target_channels=None):
    """Materialize supervised samples with targets inside ``span``.

    Inputs are the ``window`` normalized patches preceding each target
    interval; spatial borders are zero padded. Exactly
    ``rows * cols * (span_len - overlap with the first window)`` samples
    come back, ordered time-major then row-major.
    """
    if series.norm is None:
        raise DataError("make_samples needs a normalized series")
    if window < 1 or window >= series.T:
        raise DataError(f"window {window} unusable for series of length {series.T}")
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"patch_size must be odd, got {patch_size}")
    start, end = span if span is not None else (0, series.T)
    t_lo = max(window, start)
    if t_lo >= end:
        raise DataError(f"span ({start}, {end}) leaves no sample targets (window {window})")
    v_out = series.n_channels if target_channels is None else target_channels
    norm = series.normalized()
    r = patch_size // 2
    padded = np.pad(norm, ((0, 0), (r, r), (r, r), (0, 0)))
    out = []
    for t in range(t_lo, end):
        for i in range(series.rows):
            for j in range(series.cols):
                out.append(
                    TrainingSample(
                        patches=padded[t - window : t, i : i + patch_size, j : j + patch_size, :].copy(),
                        target=norm[t, i, j, :v_out].copy(),
                        region_id=i * series.cols + j,
                        timestamp=t,
                    )
                )
    return out


@dataclass
class CityDataset:
    """One city's series plus split, labels, and fast batch access."""

    city_id: str
    series: GridSeries
    role: str = "source"
    train_end: int | None = None
    archetypes: np.ndarray | None = None  # [n_regions] synthetic ground truth
    assignments: list | None = None
    onehots: np.ndarray | None = None  # [n_regions, n_clusters]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_regions(self):
        return self.series.n_regions

    def set_split(self, mode):
        """Fix the train/test boundary and fit normalization on train."""
        (t0, t1), _ = split(self.series, mode)
        self.train_end = t1
        self.series = normalize(self.series, train_len=t1)
        self._cache.clear()
        return self

    def attach_assignments(self, assignments):
        """Store per-region cluster labels (list of ClusterAssignment)."""
        if len(assignments) != self.n_regions:
            raise DataError(
                f"{len(assignments)} assignments for {self.n_regions} regions in {self.city_id}"
            )
        by_region = {a.region_id: a for a in assignments}
        if set(by_region) != set(range(self.n_regions)):
            raise DataError(f"assignment region ids do not cover city {self.city_id}")
        g = len(assignments[0].one_hot)
        onehots = np.zeros((self.n_regions, g))
        for rid, a in by_region.items():
            onehots[rid] = a.one_hot
        self.assignments = [by_region[r] for r in range(self.n_regions)]
        self.onehots = onehots
        return self

    # -- fast batch access -------------------------------------------------
    def prepare(self, config):
        """Build strided views and index tables for ``sample_batch``."""
        if self.train_end is None or self.series.norm is None:
            raise DataError(f"city {self.city_id}: call set_split before prepare")
        key = (config.window_len, config.patch_size, config.channels, config.target_channels)
        cached = self._cache.get("prepared")
        if cached is not None and cached["key"] == key:
            return cached
        if self.series.n_channels != config.channels:
            raise ConfigError(
                f"city {self.city_id} has {self.series.n_channels} channels, config wants {config.channels}"
            )
        w, n = config.window_len, config.patch_size
        r = n // 2
        norm = self.series.normalized()
        padded = np.pad(norm, ((0, 0), (r, r), (r, r), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (n, n), axis=(1, 2))
        win = win.transpose(0, 1, 2, 4, 5, 3)  # [T, I, J, n, n, v], zero-copy view

        def index_span(t_lo, t_hi):
            t_lo = max(w, t_lo)
            if t_lo >= t_hi:
                return (np.empty(0, np.int64),) * 3
            ts, is_, js = np.meshgrid(
                np.arange(t_lo, t_hi), np.arange(self.series.rows),
                np.arange(self.series.cols), indexing="ij",
            )
            return ts.ravel(), is_.ravel(), js.ravel()

        cached = {
            "key": key,
            "window": w,
            "norm": norm,
            "win": win,
            "v_out": config.target_channels,
            "train": index_span(0, self.train_end),
            "query": index_span(self.train_end, self.series.T),
        }
        self._cache["prepared"] = cached
        return cached

    def span_size(self, span):
        prep = self._cache.get("prepared")
        if prep is None:
            raise DataError(f"city {self.city_id}: prepare(config) before sampling")
        return prep[span][0].size

    def _gather(self, prep, t_s, i_s, j_s):
        w = prep["window"]
        tgrid = t_s[:, None] - w + np.arange(w)[None, :]
        patches = prep["win"][tgrid, i_s[:, None], j_s[:, None]]
        targets = prep["norm"][t_s, i_s, j_s][:, : prep["v_out"]]
        rids = i_s * self.series.cols + j_s
        onehots = self.onehots[rids] if self.onehots is not None else None
        return Batch(
            np.ascontiguousarray(patches), targets.copy(),
            externals=None, onehots=onehots, region_ids=rids, timestamps=t_s.copy(),
        )

    def sample_batch(self, rng, span, size, config=None):
        """Random batch from ``"train"`` or ``"query"`` (test) targets.

        Draws without replacement when the pool is big enough, with
        replacement otherwise.
        """
        prep = self.prepare(config) if config is not None else self._cache.get("prepared")
        if prep is None:
            raise DataError(f"city {self.city_id}: prepare(config) before sampling")
        t_all, i_all, j_all = prep[span]
        n = t_all.size
        if n == 0:
            raise DataError(f"city {self.city_id}: span {span!r} has no samples")
        if n >= size:
            take = rng.choice(n, size=size, replace=False)
        else:
            take = rng.integers(0, n, size=size)
        return self._gather(prep, t_all[take], i_all[take], j_all[take])

    def batch_slice(self, span, start, stop):
        """Deterministic contiguous batch (time-major order) for eval."""
        prep = self._cache.get("prepared")
        if prep is None:
            raise DataError(f"city {self.city_id}: prepare(config) before slicing")
        t_all, i_all, j_all = prep[span]
        sl = slice(start, min(stop, t_all.size))
        return self._gather(prep, t_all[sl], i_all[sl], j_all[sl])

    def train_samples(self, config):
        """Materialized TrainingSample list for the train span."""
        samples = make_samples(
            self.series, config.window_len, config.patch_size,
            span=(0, self.train_end), target_channels=config.target_channels,
        )
        if self.onehots is not None:
            for s in samples:
                s.cluster_onehot = self.onehots[s.region_id]
        return samples

    def raw_targets(self, batch):
        """Raw-unit target values aligned with a batch (for scoring)."""
        i = batch.region_ids // self.series.cols
        j = batch.region_ids % self.series.cols
        prep = self._cache.get("prepared")
        v_out = prep["v_out"] if prep else self.series.n_channels
        return self.series.values[batch.timestamps, i, j, :v_out]


# -- CSV ingestion -----------------------------------------------------------


def _parse_time(raw, time_format):
    if time_format:
        return int(datetime.strptime(raw.strip(), time_format).replace(tzinfo=timezone.utc).timestamp())
    return int(float(raw))


def read_trip_csv(path, columns, time_format=None):
    """Parse a trip CSV into TripRecords using a column-name mapping.

    ``columns`` maps record fields (``pickup_time``, ``pickup_lat``,
    ``pickup_lon``, optional ``dropoff_*``) to CSV header names.
    Malformed rows are skipped and counted, never raised.
    """
    for k in ("pickup_time", "pickup_lat", "pickup_lon"):
        if k not in columns:
            raise ConfigError(f"column mapping lacks required field {k!r}")
    has_dropoff = all(f"dropoff_{k}" in columns for k in ("time", "lat", "lon"))
    records = []
    stats = {"rows": 0, "malformed": 0}
    if not os.path.exists(path):
        raise DataError(f"trip CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns.values() if c not in header]
        if missing:
            raise DataError(f"{path}: CSV lacks mapped columns {missing}")
        for row in reader:
            stats["rows"] += 1
            try:
                rec = TripRecord(
                    pickup_time=_parse_time(row[columns["pickup_time"]], time_format),
                    pickup_lat=float(row[columns["pickup_lat"]]),
                    pickup_lon=float(row[columns["pickup_lon"]]),
                )
                if has_dropoff:
                    rec.dropoff_time = _parse_time(row[columns["dropoff_time"]], time_format)
                    rec.dropoff_lat = float(row[columns["dropoff_lat"]])
                    rec.dropoff_lon = float(row[columns["dropoff_lon"]])
            except (KeyError, ValueError, TypeError):
                stats["malformed"] += 1
                continue
            records.append(rec)
    return records, stats


def read_measurement_csv(path, columns, time_format=None):
    """Parse a station-measurement CSV into (time, lat, lon, value) rows.

    ``columns`` maps ``time``, ``lat``, ``lon``, ``value`` to CSV header
    names. Malformed rows are skipped and counted, never raised.
    """
    for k in ("time", "lat", "lon", "value"):
        if k not in columns:
            raise ConfigError(f"column mapping lacks required field {k!r}")
    rows_out = []
    stats = {"rows": 0, "malformed": 0}
    if not os.path.exists(path):
        raise DataError(f"measurement CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns.values() if c not in header]
        if missing:
            raise DataError(f"{path}: CSV lacks mapped columns {missing}")
        for row in reader:
            stats["rows"] += 1
            try:
                rows_out.append((
                    _parse_time(row[columns["time"]], time_format),
                    float(row[columns["lat"]]),
                    float(row[columns["lon"]]),
                    float(row[columns["value"]]),
                ))
            except (KeyError, ValueError, TypeError):
                stats["malformed"] += 1
                continue
    return rows_out, stats


def _interval_index(ts, t0, interval):
    if interval == "hour":
        return (ts - t0) // 3600
    return _month_index(ts) - _month_index(t0)


def _floor_interval(ts, interval):
    if interval == "hour":
        return (ts // 3600) * 3600
    d = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    return int(datetime(d.year, d.month, 1, tzinfo=timezone.utc).timestamp())


def rasterize(records, bbox, rows, cols, interval="hour", t0=None, t_end=None,
              city_id="city", include_dropoff=None):
    """Count trips per (interval, cell); returns (GridSeries, stats).

    Channels are pickups and, when dropoff fields are present, dropoffs.
    Every accepted event lands in exactly one cell of one interval, so
    the grand total of the pickup channel equals the accepted count.
    """
    records = list(records)
    if not records:
        raise DataError("rasterize got zero records")
    if include_dropoff is None:
        include_dropoff = any(r.dropoff_time is not None for r in records)
    if t0 is None:
        t0 = _floor_interval(min(r.pickup_time for r in records), interval)
    n_t = None
    if t_end is not None:
        n_t = _interval_index(t_end - (1 if interval == "hour" else 0), t0, interval) + 1
    if n_t is None:
        last = max(r.pickup_time for r in records)
        if include_dropoff:
            last = max(last, max(r.dropoff_time or 0 for r in records))
        n_t = _interval_index(last, t0, interval) + 1
    if n_t < 1:
        raise DataError("time span resolves to zero intervals")
    v = 2 if include_dropoff else 1
    values = np.zeros((n_t, rows, cols, v))
    stats = {"accepted": 0, "out_of_bbox": 0, "out_of_span": 0, "dropoffs": 0}
    for r in records:
        cell = bbox.cell(r.pickup_lat, r.pickup_lon, rows, cols)
        if cell is None:
            stats["out_of_bbox"] += 1
        else:
            t = _interval_index(r.pickup_time, t0, interval)
            if 0 <= t < n_t:
                values[t, cell[0], cell[1], 0] += 1.0
                stats["accepted"] += 1
            else:
                stats["out_of_span"] += 1
        if include_dropoff and r.dropoff_time is not None:
            cell = bbox.cell(r.dropoff_lat, r.dropoff_lon, rows, cols)
            if cell is not None:
                t = _interval_index(r.dropoff_time, t0, interval)
                if 0 <= t < n_t:
                    values[t, cell[0], cell[1], 1] += 1.0
                    stats["dropoffs"] += 1
    names = ("pickup", "dropoff") if include_dropoff else ("pickup",)
    series = GridSeries(city_id, rows, cols, interval, int(t0), values, names)
    return series, stats


def rasterize_measurements(rows_data, bbox, rows, cols, city_id="city"):
    """Monthly station measurements -> (value, observed-mask) channels.

    ``rows_data`` is an iterable of (epoch_seconds, lat, lon, value).
    Cell/month medians fill the value channel; gaps carry the last
    observation forward (leading gaps take the first observed value)
    and are flagged 0 in the mask channel.
    """
    rows_data = list(rows_data)
    if not rows_data:
        raise DataError("rasterize_measurements got zero rows")
    t0 = _floor_interval(min(r[0] for r in rows_data), "month")
    n_t = max(_interval_index(r[0], t0, "month") for r in rows_data) + 1
    buckets = {}
    skipped = 0
    for ts, lat, lon, val in rows_data:
        cell = bbox.cell(lat, lon, rows, cols)
        if cell is None:
            skipped += 1
            continue
        t = _interval_index(ts, t0, "month")
        buckets.setdefault((t, cell[0], cell[1]), []).append(float(val))
    values = np.zeros((n_t, rows, cols, 2))
    for (t, i, j), vs in buckets.items():
        values[t, i, j, 0] = float(np.median(vs))
        values[t, i, j, 1] = 1.0
    for i in range(rows):
        for j in range(cols):
            obs = values[:, i, j, 1] > 0
            if not obs.any():
                continue
            seq = values[:, i, j, 0]
            first = int(np.argmax(obs))
            last_val = seq[first]
            for t in range(n_t):
                if obs[t]:
                    last_val = seq[t]
                else:
                    seq[t] = last_val
    series = GridSeries(city_id, rows, cols, "month", int(t0), values, ("value", "observed"))
    return series, {"rows": len(rows_data), "out_of_bbox": skipped, "cells_observed": len(buckets)}


# -- synthetic benchmark ------------------------------------------------------

TRAFFIC_ARCHETYPES = ("flat", "am_peak", "pm_peak", "double_peak")
WATER_ARCHETYPES = ("flat", "summer_peak", "winter_peak")


def _circular_bump(phase, center, width, period):
    d = np.abs(phase - center)
    d = np.minimum(d, period - d)
    return np.exp(-0.5 * (d / width) ** 2)


def archetype_curve(preset, kind, phase, width_scale=1.0, offpeak=0.0):
    """Deterministic daily/seasonal demand shape for one archetype.

    ``width_scale`` stretches every peak width. ``offpeak`` raises the
    activity level away from the main peaks (night hours for traffic,
    autumn months for water) and applies to every archetype of a city
    alike, so cities differ in a way no single archetype label captures.
    """
    phase = np.asarray(phase, dtype=np.float64)
    w = float(width_scale)
    # peak widths/heights deliberately differ between the morning and
    # evening kinds: a pure time shift of the same bump would make the
    # two unidentifiable from value windows that carry no absolute clock
    if preset == "traffic":
        night = offpeak * _circular_bump(phase, 2.0, 2.0, 24)
        if kind == "flat":
            return 0.35 + night
        if kind == "am_peak":
            return 0.15 + 1.0 * _circular_bump(phase, 8.0, 1.5 * w, 24) + night
        if kind == "pm_peak":
            return 0.15 + 0.85 * _circular_bump(phase, 18.0, 3.0 * w, 24) + night
        if kind == "double_peak":
            return 0.10 + 0.70 * (_circular_bump(phase, 8.0, 1.5 * w, 24) + _circular_bump(phase, 18.0, 3.0 * w, 24)) + night
    elif preset == "water":
        autumn = offpeak * _circular_bump(phase, 9.0, 1.5, 12)
        if kind == "flat":
            return 0.5 + autumn
        if kind == "summer_peak":
            return 0.2 + 0.9 * _circular_bump(phase, 6.0, 1.2 * w, 12) + autumn
        if kind == "winter_peak":
            return 0.2 + 0.75 * _circular_bump(phase, 0.0, 2.4 * w, 12) + autumn
    raise ConfigError(f"unknown archetype {kind!r} for preset {preset!r}")


@dataclass(frozen=True)
class SynthCitySpec:
    city_id: str
    rows: int = 6
    cols: int = 6
    periods: int = 720  # intervals (hours or months)
    noise_sigma: float = 0.1
    scale_range: tuple = (0.8, 1.25)
    amp_range: tuple = (0.9, 1.1)
    phase_jitter: float = 0.5
    width_range: tuple = (1.0, 1.0)  # per-city peak-width multiplier
    noise_rho_range: tuple = (0.0, 0.0)  # per-city AR(1) noise correlation
    offpeak_range: tuple = (0.0, 0.0)  # per-city off-peak activity level
    archetype_mix: tuple | None = None  # defaults to uniform

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.periods < 2:
            raise ConfigError(f"degenerate synth city {self.city_id!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.width_range[0] <= 0 or self.width_range[1] < self.width_range[0]:
            raise ConfigError("width_range must be a positive (lo, hi) pair")
        lo, hi = self.noise_rho_range
        if not (-0.95 <= lo <= hi <= 0.95):
            raise ConfigError("noise_rho_range must satisfy -0.95 <= lo <= hi <= 0.95")
        lo, hi = self.offpeak_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError("offpeak_range must satisfy 0 <= lo <= hi <= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("scale_range", "amp_range", "width_range",
                    "noise_rho_range", "offpeak_range", "archetype_mix"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown SynthCitySpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SynthSpec:
    sources: tuple
    targets: tuple
    preset: str = "traffic"

    def __post_init__(self):
        if self.preset not in ("traffic", "water"):
            raise ConfigError(f"unknown synth preset {self.preset!r}")
        ids = [c.city_id for c in self.sources + self.targets]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate city ids in synth spec")

    @property
    def archetype_names(self):
        return TRAFFIC_ARCHETYPES if self.preset == "traffic" else WATER_ARCHETYPES

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"sources", "targets", "preset"}
        if unknown:
            raise ConfigError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(
            sources=tuple(SynthCitySpec.from_dict(c) for c in d.get("sources", ())),
            targets=tuple(SynthCitySpec.from_dict(c) for c in d.get("targets", ())),
            preset=d.get("preset", "traffic"),
        )


def synth_city(cspec, preset, rng, role):
    """Generate one city: per-region archetype curves, jitter, noise."""
    names = TRAFFIC_ARCHETYPES if preset == "traffic" else WATER_ARCHETYPES
    period = 24 if preset == "traffic" else 12
    interval = "hour" if preset == "traffic" else "month"
    n_regions = cspec.rows * cspec.cols
    mix = cspec.archetype_mix
    if mix is None:
        mix = tuple(1.0 / len(names) for _ in names)
    if len(mix) != len(names) or abs(sum(mix) - 1.0) > 1e-9:
        raise ConfigError(f"archetype_mix must be a distribution over {len(names)} kinds")
    arche = rng.choice(len(names), size=n_regions, p=np.asarray(mix))
    amp = rng.uniform(cspec.amp_range[0], cspec.amp_range[1], size=n_regions)
    scale = rng.uniform(cspec.scale_range[0], cspec.scale_range[1])
    shift = rng.uniform(-cspec.phase_jitter, cspec.phase_jitter)
    width = rng.uniform(cspec.width_range[0], cspec.width_range[1])
    rho = rng.uniform(cspec.noise_rho_range[0], cspec.noise_rho_range[1])
    offpeak = rng.uniform(cspec.offpeak_range[0], cspec.offpeak_range[1])
    t_idx = np.arange(cspec.periods)
    phases = (t_idx % period + shift) % period
    curves = np.stack([archetype_curve(preset, k, phases, width, offpeak) for k in names])  # [K, T]
    base = curves[arche]  # [R, T]
    clean = (scale * amp[:, None]) * base
    if cspec.noise_sigma:
        # AR(1) residuals at the city's correlation; the sqrt(1 - rho^2)
        # innovation scale keeps the marginal std exactly noise_sigma, so
        # the noise floor is comparable across cities with different rho
        eps = rng.normal(0.0, cspec.noise_sigma, size=clean.shape)
        noise = np.empty_like(eps)
        noise[:, 0] = eps[:, 0]
        innov = np.sqrt(1.0 - rho * rho)
        for t in range(1, cspec.periods):
            noise[:, t] = rho * noise[:, t - 1] + innov * eps[:, t]
    else:
        noise = np.zeros_like(clean)
    vals = (clean + noise).T.reshape(cspec.periods, cspec.rows, cspec.cols, 1)
    series = GridSeries(cspec.city_id, cspec.rows, cspec.cols, interval, 0, vals, ("volume",))
    return CityDataset(
        city_id=cspec.city_id, series=series, role=role, archetypes=arche.astype(np.int64)
    )


def synth_cities(spec, seed=0):
    """All cities of a synthetic benchmark; sources come pre-split.

    Each city draws from its own spawned RNG stream, so adding a city
    never perturbs the others for a fixed seed.
    """
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(spec.sources) + len(spec.targets))
    out = []
    for k, cspec in enumerate(spec.sources):
        city = synth_city(cspec, spec.preset, np.random.default_rng(streams[k]), "source")
        city.set_split("source")
        out.append(city)
    for k, cspec in enumerate(spec.targets):
        off = len(spec.sources)
        out.append(synth_city(cspec, spec.preset, np.random.default_rng(streams[off + k]), "target"))
    return out


# -- city directories (CLI persistence) --------------------------------------


def save_city(city, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    city.series.save(os.path.join(dirpath, "grid"))
    meta = {"city_id": city.city_id, "role": city.role, "train_end": city.train_end}
    with open(os.path.join(dirpath, "city.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    if city.archetypes is not None:
        with open(os.path.join(dirpath, "truth.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region_id", "archetype"])
            for rid, a in enumerate(city.archetypes):
                w.writerow([rid, int(a)])
    if city.assignments is not None:
        with open(os.path.join(dirpath, "assignments.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region_id", "centroid_id"])
            for a in city.assignments:
                w.writerow([a.region_id, a.centroid_id])


def load_city(dirpath):
    with open(os.path.join(dirpath, "city.json")) as fh:
        meta = json.load(fh)
    series = GridSeries.load(os.path.join(dirpath, "grid"))
    city = CityDataset(
        city_id=meta["city_id"], series=series, role=meta["role"], train_end=meta["train_end"]
    )
    truth = os.path.join(dirpath, "truth.csv")
    if os.path.exists(truth):
        with open(truth, newline="") as fh:
            rows = list(csv.DictReader(fh))
        arr = np.zeros(len(rows), dtype=np.int64)
        for r in rows:
            arr[int(r["region_id"])] = int(r["archetype"])
        city.archetypes = arr
    assign = os.path.join(dirpath, "assignments.csv")
    if os.path.exists(assign):
        with open(assign, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n_clusters = max(int(r["centroid_id"]) for r in rows) + 1
        eye = np.eye(n_clusters)
        city.attach_assignments([
            ClusterAssignment(int(r["region_id"]), int(r["centroid_id"]),
                              eye[int(r["centroid_id"])].copy())
            for r in rows
        ])
    return city
