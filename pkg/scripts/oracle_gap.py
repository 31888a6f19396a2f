"""Upper bound on what per-annotator transitions can add over a shared one.

Trains the corrected classifier with the generator's true per-annotator
transitions, with their average over annotators (the best any single shared
matrix per instance can do), and without correction. The first two
accuracies bound the gain available to any per-annotator estimator.

    python3 scripts/oracle_gap.py --class-sep 4 --r-bar 2
"""

import argparse

import numpy as np

from crowdtransfer import crowdsim as cs
from crowdtransfer import crowdtrain as ct
from crowdtransfer.config import ExperimentConfig


class TrueTransitions(ct.HeadSource):
    def __init__(self, pool, pooled=False):
        super().__init__("oracle", thetas=np.zeros((pool.num_annotators, 1, 1)))
        self.pool = pool
        self.pooled = pooled

    def transitions(self, x, annotators, num_classes):
        if not self.pooled:
            return ct.true_transitions(self.pool, x, annotators)
        r = self.pool.num_annotators
        return sum(ct.true_transitions(self.pool, x, np.full(len(x), j)) for j in range(r)) / r


def main():
    cfg = ExperimentConfig()
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--class-sep", type=float, default=cfg.data.class_sep)
    p.add_argument("--r-bar", type=float, default=cfg.noise.mean_annotations)
    p.add_argument("--epochs", type=int, default=cfg.classifier.epochs)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()

    d, nz, cc = cfg.data, cfg.noise, cfg.classifier
    rows = []
    for seed in args.seeds:
        crowd, pool = cs.simulate(d.n, d.d, d.C, args.class_sep, nz.R, nz.G, nz.rho, nz.rho_max, args.r_bar, seed)
        accs = []
        for src in (TrueTransitions(pool), TrueTransitions(pool, pooled=True), None):
            net, _ = ct.train_classifier(crowd, src, epochs=args.epochs, lr=cc.lr, weight_decay=cc.weight_decay,
                                         lr_milestones=cc.lr_milestones, hidden=cc.hidden, seed=seed)
            accs.append(ct.accuracy(net, crowd.base))
        rows.append(accs)
        print(f"seed {seed}: per-annotator {accs[0]:.4f}  pooled {accs[1]:.4f}  uncorrected {accs[2]:.4f}")
    mean = np.mean(rows, axis=0)
    print(f"mean:   per-annotator {mean[0]:.4f}  pooled {mean[1]:.4f}  uncorrected {mean[2]:.4f}")
    print(f"per-annotator minus pooled: {100 * (mean[0] - mean[1]):+.2f} pts")


if __name__ == "__main__":
    main()
