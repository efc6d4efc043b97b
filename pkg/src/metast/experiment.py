"""Benchmark driver: methods x seeds x targets, reports, and sweeps.

One *cell* trains and scores a single method on a single
(seed, target) pair. All methods within a seed share the same generated
data and the same clustering, so per-seed scores are paired and the
summary can attach paired t-tests against a reference method. Reports
are bit-reproducible for a fixed config; wall-clock columns are the
only nondeterministic fields and are excluded from fingerprints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import baselines, clustering
from .data import SynthSpec, denormalize, synth_cities
from .errors import ConfigError, DataError
from .meta import MetaConfig, adapt_to_target, meta_train
from .metrics import paired_t_test, rmse
from .stnet import StNetConfig, StNetModel

# Values seed each method's training stream. The trained methods share
# one stream: spawn children are index-stable, so the fine-tune and
# meta-train pipelines draw the same initialization (their architectures
# match weight-for-weight) and aligned sampling streams. That makes the
# seed-paired comparisons reflect the training objective and the pattern
# memory rather than init and batch noise (common random numbers).
METHOD_IDS = {
    "ha": 0,
    "arima-lite": 1,
    "st-net": 2,
    "single-ft": 5,
    "multi-ft": 5,
    "maml": 5,
    "metast": 5,
}

NEURAL_METHODS = ("st-net", "single-ft", "multi-ft", "maml", "metast")


@dataclass(frozen=True)
class ExperimentConfig:
    stnet: StNetConfig
    meta: MetaConfig
    synth: SynthSpec
    memory_patterns: int = 4
    memory_dim: int = 8
    cluster_metric: str = "euclidean"
    target_split: str = "target-1"
    methods: tuple = ("ha", "arima-lite", "st-net", "multi-ft", "maml", "metast")
    seeds: tuple = (0, 1, 2, 3, 4)
    reference_method: str = "maml"
    pretrain_steps: int | None = None  # defaults to meta.max_meta_iters
    single_source: str | None = None  # city id for single-ft; default first source
    ar_p: int = 3
    ar_q: int = 1

    def __post_init__(self):
        for m in self.methods:
            if _method_base(m) not in METHOD_IDS:
                raise ConfigError(f"unknown method {m!r}")
        if self.memory_patterns < 1 or self.memory_dim < 1:
            raise ConfigError("memory dimensions must be positive")
        if self.cluster_metric not in clustering.METRICS:
            raise ConfigError(f"unknown cluster metric {self.cluster_metric!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.synth.targets:
            raise ConfigError("the experiment needs at least one target city")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ExperimentConfig fields: {sorted(unknown)}")
        if "stnet" not in d or "synth" not in d:
            raise ConfigError("config requires 'stnet' and 'synth' sections")
        d["stnet"] = StNetConfig.from_dict(d["stnet"])
        d["meta"] = MetaConfig.from_dict(d.get("meta", {}))
        d["synth"] = SynthSpec.from_dict(d["synth"])
        for key in ("methods", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_(self, **kw):
        return replace(self, **kw)


def _method_base(method):
    return method.split(":", 1)[0]


def set_config_param(cfg, path, value):
    """Return a config with a dotted field replaced, e.g. ``meta.gamma``."""
    parts = path.split(".")
    if len(parts) == 1:
        if parts[0] not in cfg.__dataclass_fields__:
            raise ConfigError(f"unknown config field {path!r}")
        return replace(cfg, **{parts[0]: value})
    if len(parts) == 2 and parts[0] in ("meta", "stnet"):
        section = getattr(cfg, parts[0])
        if parts[1] not in section.__dataclass_fields__:
            raise ConfigError(f"unknown config field {path!r}")
        return replace(cfg, **{parts[0]: replace(section, **{parts[1]: value})})
    raise ConfigError(f"unsupported sweep parameter {path!r}")


# -- per-seed shared state -----------------------------------------------------


def build_seed_data(cfg, seed):
    """Generate cities, apply splits, cluster sources, attach labels.

    Returns (sources, targets, cluster_info). Everything here is shared
    by all methods evaluated under this seed.
    """
    cities = synth_cities(cfg.synth, seed=seed)
    sources = [c for c in cities if c.role == "source"]
    targets = [c for c in cities if c.role == "target"]
    for t in targets:
        t.set_split(cfg.target_split)
    for c in sources + targets:
        c.prepare(cfg.stnet)

    pooled = []
    owners = []
    for c in sources:
        profs = clustering.build_profiles(c.series, train_end=c.train_end)
        pooled.extend(profs)
        owners.extend([(c, p.region_id) for p in profs])
    centroids, assignments = clustering.kmeans(
        np.stack([p.profile for p in pooled]),
        cfg.memory_patterns,
        metric=cfg.cluster_metric,
        seed=seed,
    )
    for c in sources:
        per_city = []
        for a, (owner, rid) in zip(assignments, owners):
            if owner is c:
                per_city.append(clustering.ClusterAssignment(rid, a.centroid_id, a.one_hot))
        c.attach_assignments(per_city)

    # Majority ground-truth archetype per cluster slot (synthetic truth).
    slot_to_arch = {}
    n_arch = len(cfg.synth.archetype_names)
    for g in range(cfg.memory_patterns):
        counts = np.zeros(n_arch, dtype=np.int64)
        for a, (owner, rid) in zip(assignments, owners):
            if a.centroid_id == g and owner.archetypes is not None:
                counts[owner.archetypes[rid]] += 1
        slot_to_arch[g] = int(np.argmax(counts)) if counts.sum() else -1
    info = {"centroids": centroids, "slot_to_archetype": slot_to_arch}
    return sources, targets, info


def eval_rmse(model, theta, memory, city, chunk=4096):
    """Raw-unit RMSE of a trained model over the city's test samples."""
    n = city.span_size("query")
    if n == 0:
        raise DataError(f"city {city.city_id} has no test samples")
    v_out = model.config.target_channels
    sq = 0.0
    count = 0
    for start in range(0, n, chunk):
        b = city.batch_slice("query", start, start + chunk)
        pred = model.predict(theta, b, memory)
        raw_pred = denormalize(pred, city.series.norm, channels=range(v_out))
        raw_true = city.raw_targets(b)
        sq += float(((raw_pred - raw_true) ** 2).sum())
        count += raw_true.size
    return float(np.sqrt(sq / count))


def region_attention(model, theta, memory, city, span="query", chunk=4096):
    """Mean attention weights per region: [n_regions, G]."""
    n = city.span_size(span)
    sums = np.zeros((city.n_regions, memory.n_patterns))
    counts = np.zeros(city.n_regions)
    for start in range(0, n, chunk):
        b = city.batch_slice(span, start, start + chunk)
        p = model.attention(theta, b, memory)
        np.add.at(sums, b.region_ids, p)
        np.add.at(counts, b.region_ids, 1.0)
    counts = np.where(counts > 0, counts, 1.0)
    return sums / counts[:, None]


def run_cell(cfg, method, seed, target_id=None, shared=None, collect=None):
    """Train and score one method under one seed. Returns a cell dict."""
    t_begin = time.perf_counter()
    base = _method_base(method)
    if base not in METHOD_IDS:
        raise ConfigError(f"unknown method {method!r}")
    if shared is None:
        shared = build_seed_data(cfg, seed)
    sources, targets, info = shared
    if target_id is None:
        target = targets[0]
    else:
        matches = [t for t in targets if t.city_id == target_id]
        if not matches:
            raise ConfigError(f"unknown target city {target_id!r}")
        target = matches[0]

    train_seed = int(np.random.SeedSequence((seed, METHOD_IDS[base])).generate_state(1)[0])
    eval_start = max(target.train_end, cfg.stnet.window_len)
    cell = {
        "method": method,
        "seed": seed,
        "target": target.city_id,
        "split": cfg.target_split,
    }

    if base == "ha":
        preds = baselines.ha_forecast(target.series, target.train_end)
        v_out = cfg.stnet.target_channels
        truth = target.series.values[eval_start:, :, :, :v_out]
        pred = preds[eval_start - target.train_end :, :, :, :v_out]
        cell["rmse"] = rmse(pred, truth)
    elif base == "arima-lite":
        preds, ridge_used = baselines.ar_forecast_grid(
            target.series, target.train_end, p=cfg.ar_p, q=cfg.ar_q
        )
        v_out = cfg.stnet.target_channels
        truth = target.series.values[eval_start:, :, :, :v_out]
        pred = preds[eval_start - target.train_end :, :, :, :v_out]
        cell["rmse"] = rmse(pred, truth)
        cell["ridge_used"] = bool(ridge_used)
    elif base in NEURAL_METHODS:
        target_train = _target_train_batch(target)
        if base == "metast":
            model = StNetModel(cfg.stnet, cfg.memory_patterns, cfg.memory_dim)
            theta0, memory, _ = meta_train(model, sources, cfg.meta, seed=train_seed)
            theta = adapt_to_target(model, theta0, memory, target_train, cfg.meta, seed=train_seed)
            frozen = memory.frozen()
            cell["rmse"] = eval_rmse(model, theta, frozen, target)
            # pattern recovery is a property of the meta-trained prior, so
            # match attention at theta0; adaptation tilts it toward the
            # few-shot support set and is reported separately
            att = region_attention(model, theta0, frozen, target)
            cell["attention_match"] = _attention_match(att, target, info["slot_to_archetype"])
            att_ad = region_attention(model, theta, frozen, target)
            cell["attention_match_adapted"] = _attention_match(att_ad, target, info["slot_to_archetype"])
            if collect is not None:
                collect.update(theta=theta, memory=memory, model=model, attention=att)
        elif base == "maml":
            model = StNetModel(cfg.stnet)
            meta_cfg = cfg.meta.with_(gamma=0.0)
            theta0, _, _ = meta_train(model, sources, meta_cfg, seed=train_seed)
            theta = adapt_to_target(model, theta0, None, target_train, meta_cfg, seed=train_seed)
            cell["rmse"] = eval_rmse(model, theta, None, target)
        elif base == "st-net":
            model = StNetModel(cfg.stnet)
            theta0 = model.init_params(rng=np.random.default_rng(np.random.SeedSequence(train_seed)))
            theta = adapt_to_target(model, theta0, None, target_train, cfg.meta, seed=train_seed)
            cell["rmse"] = eval_rmse(model, theta, None, target)
        else:  # single-ft / multi-ft
            model = StNetModel(cfg.stnet)
            if base == "single-ft":
                wanted = method.split(":", 1)[1] if ":" in method else cfg.single_source
                wanted = wanted or sources[0].city_id
                pool = [c for c in sources if c.city_id == wanted]
                if not pool:
                    raise ConfigError(f"single-ft source {wanted!r} not among source cities")
            else:
                pool = sources
            steps = cfg.pretrain_steps if cfg.pretrain_steps is not None else cfg.meta.max_meta_iters
            theta = baselines.fine_tune(
                model, pool, target_train, cfg.meta, seed=train_seed, pretrain_steps=steps
            )
            cell["rmse"] = eval_rmse(model, theta, None, target)
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(f"unknown method {method!r}")

    cell["wall_ms"] = (time.perf_counter() - t_begin) * 1e3
    return cell


def _target_train_batch(target):
    n = target.span_size("train")
    if n == 0:
        raise DataError(f"target {target.city_id} has no adaptation samples")
    return target.batch_slice("train", 0, n)


def _attention_match(att, target, slot_to_arch):
    """Fraction of regions whose top memory slot maps to their archetype."""
    if target.archetypes is None:
        return None
    slots = np.argmax(att, axis=1)
    pred = np.array([slot_to_arch.get(int(g), -1) for g in slots])
    return float(np.mean(pred == target.archetypes))


def run_experiment(cfg, out_dir=None, threads=1):
    """All cells plus a significance summary. Returns the report dict."""
    cells = []
    for seed in cfg.seeds:
        shared = build_seed_data(cfg, seed)
        _, targets, _ = shared
        for target in targets:
            for method in cfg.methods:
                cells.append(run_cell(cfg, method, seed, target.city_id, shared=shared))
    report = {
        "schema": "metast-report-v1",
        "target_split": cfg.target_split,
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "reference_method": cfg.reference_method,
        "cells": cells,
        "summary": summarize(cfg, cells),
    }
    if out_dir:
        write_report(report, out_dir)
    return report


def summarize(cfg, cells):
    """Mean/std per method with paired t-tests against the reference."""
    by_key = {}
    for cell in cells:
        by_key.setdefault((cell["method"], cell["target"]), {})[cell["seed"]] = cell["rmse"]
    targets = sorted({t for (_, t) in by_key})
    rows = []
    for target in targets:
        ref_scores = by_key.get((cfg.reference_method, target))
        for method in cfg.methods:
            scores = by_key.get((method, target))
            if not scores:
                continue
            seeds = sorted(scores)
            vals = np.array([scores[s] for s in seeds])
            row = {
                "method": method,
                "target": target,
                "n": len(vals),
                "mean_rmse": float(vals.mean()),
                "std_rmse": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            }
            if (
                ref_scores
                and method != cfg.reference_method
                and sorted(ref_scores) == seeds
                and len(seeds) >= 2
            ):
                res = paired_t_test(vals, np.array([ref_scores[s] for s in seeds]))
                stars = ""
                if not res.degenerate and res.mean_diff < 0:
                    if res.p < 0.01:
                        stars = "**"
                    elif res.p < 0.05:
                        stars = "*"
                row["vs_reference"] = {
                    "t": res.t,
                    "p": res.p,
                    "dof": res.dof,
                    "mean_diff": res.mean_diff,
                    "degenerate": res.degenerate,
                    "stars": stars,
                }
            rows.append(row)
    return rows


def sweep(cfg, param, values, out_dir=None):
    """Re-run the experiment at each value of one config parameter."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for value in values:
        sub = set_config_param(cfg, param, value)
        report = run_experiment(sub)
        for cell in report["cells"]:
            rows.append({"param": param, "value": value, **{
                k: cell[k] for k in ("method", "seed", "target", "split", "rmse")
            }})
    result = {"schema": "metast-sweep-v1", "param": param,
              "values": list(values), "rows": rows}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["param", "value", "method", "seed",
                                               "target", "split", "rmse"])
            w.writeheader()
            w.writerows(rows)
    return result


def export_patterns(model, theta, memory, city, path, span="query"):
    """Per-region attention weights + raw demand profile as CSV."""
    att = region_attention(model, theta, memory, city, span=span)
    period = city.series.period
    phases = np.asarray(city.series.phases())
    raw = city.series.values[..., 0]
    g = memory.n_patterns
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["region_id", "top_slot"] + [f"p{k}" for k in range(g)]
        header += [f"profile{ph}" for ph in range(period)]
        if city.archetypes is not None:
            header.append("archetype")
        w.writerow(header)
        for rid in range(city.n_regions):
            i, j = divmod(rid, city.series.cols)
            prof = [float(raw[phases == ph, i, j].mean()) for ph in range(period)]
            row = [rid, int(np.argmax(att[rid]))] + [f"{v:.6f}" for v in att[rid]]
            row += [f"{v:.6f}" for v in prof]
            if city.archetypes is not None:
                row.append(int(city.archetypes[rid]))
            w.writerow(row)
    return att


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "cells.csv"), "w", newline="") as fh:
        cols = ["method", "seed", "target", "split", "rmse", "attention_match", "wall_ms"]
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(report["cells"])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "target", "n", "mean_rmse", "std_rmse", "t", "p", "stars"])
        for row in report["summary"]:
            vs = row.get("vs_reference") or {}
            w.writerow([
                row["method"], row["target"], row["n"],
                f"{row['mean_rmse']:.6f}", f"{row['std_rmse']:.6f}",
                "" if "t" not in vs else f"{vs['t']:.4f}",
                "" if "p" not in vs else f"{vs['p']:.6g}",
                vs.get("stars", ""),
            ])


def report_fingerprint(report):
    """SHA-256 of the report with nondeterministic timing fields removed."""

    def strip(obj):
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in obj.items() if k != "wall_ms"}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    blob = json.dumps(strip(report), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
