"""Compare the three transition estimators on the default config over several seeds.

    python3 scripts/ablation.py --seeds 0 1 2 --csv ablation.csv
"""

import argparse

from crowdtransfer.cli import format_summary
from crowdtransfer.config import METHODS, ExperimentConfig, load_config
from crowdtransfer.pipeline import run_ablation, write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="JSON config; defaults when omitted")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["taidtm", "taidtm_ft", "global_only", "mv", "ds"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", help="write per-seed rows here")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    res = run_ablation(cfg, args.seeds, args.methods, workers=args.workers)
    print(f"config {cfg.config_hash()}, seeds {args.seeds}")
    print(format_summary(res["summary"]))
    fractions = [r["same_group_edge_fraction"] for r in res["rows"] if r["method"] == "taidtm"]
    if fractions:
        print(f"same-group edge share: {sum(fractions) / len(fractions):.3f}")
    if args.csv:
        write_csv(res["rows"], args.csv)


if __name__ == "__main__":
    main()
