"""Command-line entry points.

Subcommands cover the full pipeline: data generation/ingestion, pattern
clustering, meta-training, target adaptation, baselines, evaluation,
sweeps, pattern export, and the acceptance suite.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from .clustering import build_profiles, kmeans
from .errors import ConfigError, DataError, MetastError, NumericsError
from .experiment import (
    ExperimentConfig,
    build_seed_data,
    eval_rmse,
    export_patterns,
    run_cell,
    run_experiment,
    sweep,
    write_report,
)
from .meta import MEMORY_KEY, adapt_to_target, meta_train, save_meta_checkpoint
from .params import load_checkpoint, paramset_from_arrays, save_checkpoint
from .stmem import PatternMemory
from .stnet import StNetModel

log = logging.getLogger("metast")


def _load_json(path):
    if path is None:
        raise ConfigError("--config is required for this command")
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {path}: {e}")


def _experiment_config(args):
    cfg = ExperimentConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = cfg.with_(seeds=(args.seed,))
    return cfg


def _out_dir(args, default="out"):
    path = args.out_dir or default
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_ingest(args):
    """CSV -> rasterized grid. Config needs an "ingest" section."""
    raw = _load_json(args.config)
    spec = raw.get("ingest")
    if spec is None:
        raise ConfigError('ingest config must contain an "ingest" section')
    for key in ("csv", "bbox", "rows", "cols", "columns"):
        if key not in spec:
            raise ConfigError(f'ingest section missing "{key}"')
    bbox = D.BoundingBox(*[float(v) for v in spec["bbox"]])
    kind = spec.get("kind", "trips")
    out = _out_dir(args)
    city_id = spec.get("city_id", "city")
    if kind == "trips":
        records, read_stats = D.read_trip_csv(
            spec["csv"], spec["columns"], time_format=spec.get("time_format"))
        series, stats = D.rasterize(
            records, bbox, int(spec["rows"]), int(spec["cols"]),
            interval=spec.get("interval", "hour"),
            t0=spec.get("t0"), t_end=spec.get("t_end"), city_id=city_id)
        stats.update(read_stats)
    elif kind == "measurements":
        rows_data, read_stats = D.read_measurement_csv(
            spec["csv"], spec["columns"], time_format=spec.get("time_format"))
        series, stats = D.rasterize_measurements(
            rows_data, bbox, int(spec["rows"]), int(spec["cols"]),
            city_id=city_id)
        stats["malformed"] = read_stats["malformed"]
    else:
        raise ConfigError(f"unknown ingest kind: {kind!r}")
    city_dir = os.path.join(out, city_id)
    D.save_city(D.CityDataset(city_id, series, role=spec.get("role", "source")),
                city_dir)
    _write_json(os.path.join(city_dir, "ingest_stats.json"), stats)
    log.info("ingested %s: T=%d regions=%d stats=%s",
             city_id, series.T, series.n_regions, stats)
    print(json.dumps({"city_id": city_id, "T": series.T, **stats}))
    return 0


def cmd_synth(args):
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    cities = D.synth_cities(cfg.synth, seed=seed)
    out = _out_dir(args)
    for city in cities:
        D.save_city(city, os.path.join(out, city.city_id))
    ids = [c.city_id for c in cities]
    log.info("wrote %d cities to %s", len(cities), out)
    print(json.dumps({"seed": seed, "cities": ids}))
    return 0


def cmd_cluster(args):
    """Pool source-city profiles, run K-means, write assignments."""
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    sources, _, info = build_seed_data(cfg, seed)
    out = _out_dir(args)
    rows = []
    for city in sources:
        for a in city.assignments:
            rows.append((city.city_id, a.region_id, a.centroid_id))
    with open(os.path.join(out, "assignments.csv"), "w") as f:
        f.write("city_id,region_id,cluster\n")
        for cid, rid, lab in rows:
            f.write(f"{cid},{rid},{lab}\n")
    save_checkpoint(os.path.join(out, "centroids.ckpt"),
                    {"centroids": info["centroids"]})
    counts = np.bincount([r[2] for r in rows],
                         minlength=cfg.memory_patterns).tolist()
    print(json.dumps({"seed": seed, "n_clusters": cfg.memory_patterns,
                      "metric": cfg.cluster_metric, "sizes": counts}))
    return 0


def cmd_train_meta(args):
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    sources, _, _ = build_seed_data(cfg, seed)
    out = _out_dir(args)
    model = StNetModel(cfg.stnet, cfg.memory_patterns, cfg.memory_dim)
    ckpt = os.path.join(out, "meta_final.ckpt")
    theta, memory, history = meta_train(
        model, sources, cfg.meta, seed=seed,
        log_path=os.path.join(out, "train_log.csv"), checkpoint_path=ckpt)
    last = history[-1] if history else {}
    print(json.dumps({"seed": seed, "iters": len(history),
                      "final_loss": last.get("loss"),
                      "checkpoint": ckpt}))
    return 0


def cmd_adapt(args):
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    _, targets, _ = build_seed_data(cfg, seed)
    target = targets[0]
    model = StNetModel(cfg.stnet, cfg.memory_patterns, cfg.memory_dim)
    arrays = load_checkpoint(args.checkpoint)
    if MEMORY_KEY not in arrays:
        raise DataError(f"checkpoint has no {MEMORY_KEY!r} entry: {args.checkpoint}")
    mem_arr = arrays.pop(MEMORY_KEY)
    theta0 = paramset_from_arrays(arrays)
    memory = PatternMemory(mem_arr)
    support = target.batch_slice("train", 0, target.span_size("train"))
    theta = adapt_to_target(model, theta0, memory, support, cfg.meta, seed=seed)
    out = _out_dir(args)
    adapted = os.path.join(out, "adapted.ckpt")
    save_meta_checkpoint(adapted, theta, memory)
    score = eval_rmse(model, theta, memory.frozen(), target)
    _write_json(os.path.join(out, "adapt_result.json"),
                {"seed": seed, "target": target.city_id,
                 "split": cfg.target_split, "rmse": score})
    print(json.dumps({"rmse": score, "checkpoint": adapted}))
    return 0


def cmd_baseline(args):
    cfg = _experiment_config(args)
    method = args.method
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    shared = build_seed_data(cfg, seed)
    cell = run_cell(cfg, method, seed, shared=shared)
    print(json.dumps(cell))
    return 0


def cmd_evaluate(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    report = run_experiment(cfg, out_dir=out, threads=args.threads)
    for row in report["summary"]:
        stars = (row.get("vs_reference") or {}).get("stars", "")
        print(f"{row['method']:<12} {row['target']:<8} "
              f"rmse={row['mean_rmse']:.4f} +/- {row['std_rmse']:.4f} {stars}")
    print(f"report written to {out}")
    return 0


def cmd_sweep(args):
    cfg = _experiment_config(args)
    values = [json.loads(v) for v in args.values.split(",")]
    out = _out_dir(args)
    rows = sweep(cfg, args.param, values, out_dir=out)["rows"]
    by_value = {}
    for r in rows:
        by_value.setdefault(r["value"], []).append(r["rmse"])
    for v in values:
        vals = by_value.get(v, [])
        mean = float(np.mean(vals)) if vals else float("nan")
        print(f"{args.param}={v}: mean rmse {mean:.4f} over {len(vals)} runs")
    return 0


def cmd_export_patterns(args):
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    _, targets, _ = build_seed_data(cfg, seed)
    target = targets[0]
    model = StNetModel(cfg.stnet, cfg.memory_patterns, cfg.memory_dim)
    arrays = load_checkpoint(args.checkpoint)
    if MEMORY_KEY not in arrays:
        raise DataError(f"checkpoint has no {MEMORY_KEY!r} entry: {args.checkpoint}")
    mem_arr = arrays.pop(MEMORY_KEY)
    theta = paramset_from_arrays(arrays)
    memory = PatternMemory(mem_arr)
    out = _out_dir(args)
    path = os.path.join(out, "patterns.csv")
    export_patterns(model, theta, memory.frozen(), target, path)
    print(f"wrote {path}")
    return 0


def cmd_accept(args):
    from .acceptance import acceptance_suite

    out = _out_dir(args)
    verdict = acceptance_suite(fast=args.fast, criteria=args.criteria)
    _write_json(os.path.join(out, "verdict.json"), verdict)
    for item in verdict["criteria"]:
        mark = "PASS" if item["passed"] else "FAIL"
        print(f"[{mark}] criterion {item['id']}: {item['name']} "
              f"({item['elapsed_s']:.1f}s) {item['detail']}")
    print(f"{verdict['n_passed']}/{verdict['n_total']} criteria passed")
    return 0 if verdict["all_passed"] else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metast",
        description="Cross-city spatial-temporal prediction with "
                    "meta-learning and pattern memory.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with one seed")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("ingest", help="rasterize a trip/measurement CSV onto a grid")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate the synthetic multi-city benchmark")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="cluster region pattern profiles")
    common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-meta", help="meta-train the initialization and memory")
    common(p)
    p.set_defaults(func=cmd_train_meta)

    p = sub.add_parser("adapt", help="adapt a meta checkpoint to the target city")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("baseline", help="run a single method on the benchmark")
    common(p)
    p.add_argument("--method", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="run the full method x seed experiment grid")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sweep one config parameter")
    common(p)
    p.add_argument("--param", required=True, help="dotted path, e.g. meta.gamma")
    p.add_argument("--values", required=True, help="comma-separated JSON values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-patterns", help="write per-region attention and profiles")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_patterns)

    p = sub.add_parser("accept", help="run the acceptance suite")
    common(p)
    p.add_argument("--fast", action="store_true",
                   help="skip the long-running benchmark criteria")
    p.add_argument("--criteria", default=None,
                   help="comma-separated criterion ids to run, e.g. 1,4,9")
    p.set_defaults(func=cmd_accept)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except MetastError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
