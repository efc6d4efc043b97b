"""Sweep the clustering-loss weight and report the per-seed optimum.

The interesting question is whether the best weight sits strictly inside
the swept range (too small ignores the pattern structure, too large
drowns the prediction loss).

Usage:
    python scripts/run_sweeps.py --out-dir out/gamma_sweep
    python scripts/run_sweeps.py --param meta.inner_lr --values 0.003,0.01,0.03
"""

import argparse
import json
import logging
import sys
from collections import defaultdict

import numpy as np

from metast.experiment import ExperimentConfig, sweep
from metast.presets import traffic_benchmark, water_benchmark

logging.basicConfig(level=logging.INFO,
                    format="%(asctime)s %(levelname)s %(message)s")
log = logging.getLogger("run_sweeps")

PRESETS = {"traffic": traffic_benchmark, "water": water_benchmark}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", choices=sorted(PRESETS), default="traffic")
    parser.add_argument("--config", default=None)
    parser.add_argument("--param", default="meta.gamma")
    parser.add_argument("--values", default="1e-6,1e-5,1e-4,1e-3,1e-2")
    parser.add_argument("--methods", default="metast")
    parser.add_argument("--out-dir", default="out/sweep")
    args = parser.parse_args()

    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig.from_dict(PRESETS[args.preset]())
    cfg = cfg.with_(methods=tuple(args.methods.split(",")))
    values = [json.loads(v) for v in args.values.split(",")]

    log.info("sweeping %s over %s for %s", args.param, values, cfg.methods)
    result = sweep(cfg, args.param, values, out_dir=args.out_dir)

    by_seed = defaultdict(dict)
    for row in result["rows"]:
        by_seed[row["seed"]].setdefault(row["value"], []).append(row["rmse"])

    interior = 0
    for seed in sorted(by_seed):
        means = [float(np.mean(by_seed[seed][v])) for v in values]
        best = int(np.argmin(means))
        inside = 0 < best < len(values) - 1
        interior += inside
        scores = " ".join(f"{v:g}:{m:.4f}" for v, m in zip(values, means))
        print(f"seed {seed}: {scores}  best={values[best]:g}"
              f"{' (interior)' if inside else ' (edge)'}")
    print(f"interior optimum in {interior}/{len(by_seed)} seeds")
    print(f"sweep written to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
