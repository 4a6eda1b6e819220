"""Run the strategy ablation and write comparison.{json,csv,md}.

    python3 scripts/run_ablation.py --num-scenes 50 --seed 0 --out runs/ablation
"""

import argparse
import os
import time
from dataclasses import replace

from tbasim.harness import ExperimentConfig, Strategy, load_config, report, run_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--num-scenes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--with-detection", action="store_true", help="also run the detection-style ablation")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, num_scenes=args.num_scenes, seed=args.seed, output_dir=args.out)
    strategies = [Strategy.BASELINE, Strategy.SCA, Strategy.SCA_DROPOUT]
    if args.with_detection:
        strategies.append(Strategy.DETECTION)

    t0 = time.perf_counter()
    comparison = run_comparison(cfg, strategies)
    os.makedirs(args.out, exist_ok=True)
    for fmt, ext in (("json", "json"), ("csv", "csv"), ("markdown", "md")):
        with open(os.path.join(args.out, f"comparison.{ext}"), "w") as fh:
            fh.write(report(comparison, fmt))
    print(report(comparison, "markdown"), end="")
    print(f"{time.perf_counter() - t0:.1f} s, config {comparison.config_hash}")


if __name__ == "__main__":
    main()
