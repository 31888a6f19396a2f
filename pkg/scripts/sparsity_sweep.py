"""Accuracy gap between graph-transferred and fine-tuned heads as annotations get sparser.

    python3 scripts/sparsity_sweep.py --values 1 2 4 --seeds 0 1 2
"""

import argparse

from crowdtransfer.config import ExperimentConfig, load_config
from crowdtransfer.pipeline import run_ablation, summary_lookup, write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--values", type=float, nargs="+", default=[1.0, 2.0, 4.0],
                   help="mean annotations per instance")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    res = run_ablation(cfg, args.seeds, ("taidtm", "taidtm_ft"), ("r_bar", args.values), args.workers)
    print(f"{'r_bar':>6} {'taidtm':>8} {'ft':>8} {'gap (pts)':>10}")
    for v in args.values:
        full = summary_lookup(res["summary"], "taidtm", v)["test_accuracy_mean"]
        ft = summary_lookup(res["summary"], "taidtm_ft", v)["test_accuracy_mean"]
        print(f"{v:>6g} {full:>8.4f} {ft:>8.4f} {100 * (full - ft):>+10.2f}")
    if args.csv:
        write_csv(res["rows"], args.csv)


if __name__ == "__main__":
    main()
