"""Run a full benchmark preset and print the significance table.

Usage:
    python scripts/run_benchmark.py --preset traffic --out-dir out/traffic
    python scripts/run_benchmark.py --config configs/traffic_synth.json
"""

import argparse
import json
import logging
import sys

from metast.experiment import ExperimentConfig, run_experiment
from metast.presets import traffic_benchmark, water_benchmark

logging.basicConfig(level=logging.INFO,
                    format="%(asctime)s %(levelname)s %(message)s")
log = logging.getLogger("run_benchmark")

PRESETS = {"traffic": traffic_benchmark, "water": water_benchmark}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", choices=sorted(PRESETS), default="traffic")
    parser.add_argument("--config", default=None,
                        help="JSON config overriding --preset")
    parser.add_argument("--out-dir", default="out/benchmark")
    parser.add_argument("--seeds", default=None,
                        help="comma-separated seed override, e.g. 0,1,2")
    args = parser.parse_args()

    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig.from_dict(PRESETS[args.preset]())
    if args.seeds:
        cfg = cfg.with_(seeds=tuple(int(s) for s in args.seeds.split(",")))

    log.info("methods=%s seeds=%s target_split=%s",
             cfg.methods, cfg.seeds, cfg.target_split)
    report = run_experiment(cfg, out_dir=args.out_dir)

    print(f"{'method':<14} {'rmse':>8} {'std':>8} {'p vs ref':>10}")
    for row in report["summary"]:
        vs = row.get("vs_reference")
        p = f"{vs['p']:.4f}{vs['stars']}" if vs else "(ref)"
        print(f"{row['method']:<14} {row['mean_rmse']:>8.4f} "
              f"{row['std_rmse']:>8.4f} {p:>10}")
    metast_rows = [r for r in report["summary"] if r["method"] == "metast"]
    ref_rows = [r for r in report["summary"]
                if r["method"] == cfg.reference_method]
    if metast_rows and ref_rows:
        gain = 1.0 - metast_rows[0]["mean_rmse"] / ref_rows[0]["mean_rmse"]
        print(f"relative improvement over {cfg.reference_method}: {100 * gain:.1f}%")
    print(f"report written to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
