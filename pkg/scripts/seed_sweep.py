"""Check the Baseline vs SCA_Dropout directions over several seeds.

Prints, per seed, the proposal positive-label rate, newborn confidence and TQ
recall of both strategies, and whether each direction holds.
"""

import argparse
from dataclasses import replace

from tbasim.harness import ExperimentConfig, Strategy, run_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--num-scenes", type=int, default=20)
    ap.add_argument("--suppression", type=float, default=None)
    args = ap.parse_args()

    base = ExperimentConfig(num_scenes=args.num_scenes)
    if args.suppression is not None:
        base = replace(base, oracle=replace(base.oracle, suppression_strength=args.suppression))
    print("seed  pq_rate(B)  pq_rate(F)  nb(B)   nb(F)   tq(B)   tq(F)   directions")
    for seed in args.seeds:
        c = run_comparison(replace(base, seed=seed), [Strategy.BASELINE, Strategy.SCA_DROPOUT])
        b, f = c.results["Baseline"], c.results["SCA_Dropout"]
        pb, pf = b.positive_label_rates["Proposal"], f.positive_label_rates["Proposal"]
        nb, nf = b.metrics.nb_conf_mean, f.metrics.nb_conf_mean
        ok = pf > pb and nb is not None and nf is not None and nf > nb
        print(f"{seed:4d}  {pb:10.4f}  {pf:10.4f}  {nb or 0:.4f}  {nf or 0:.4f}  "
              f"{b.metrics.tq_recall or 0:.4f}  {f.metrics.tq_recall or 0:.4f}  {'ok' if ok else 'REVERSED'}")


if __name__ == "__main__":
    main()
