"""Warmup classifier on pooled noisy pairs and posterior-threshold distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .crowdsim import ConfigError
from .rng import stream


class PipelineError(RuntimeError):
    pass


@dataclass
class DistilledSet:
    """Distilled instances plus every annotation attached to them.

    Examples are indexed ``0..m-1``; the ``pair_*`` arrays list annotations,
    with ``pair_example`` pointing into the examples.
    """

    instance_ids: np.ndarray  # (m,) index into the crowd's instances
    features: np.ndarray  # (m, d)
    y_star: np.ndarray  # (m,)
    pair_example: np.ndarray
    pair_annotator: np.ndarray
    pair_label: np.ndarray
    num_annotators: int
    num_classes: int
    floor: int = 5

    @property
    def m(self):
        return len(self.instance_ids)

    @property
    def m_j(self):
        return np.bincount(self.pair_annotator, minlength=self.num_annotators)

    @property
    def insufficient(self):
        return self.m_j < self.floor

    def pairs_of(self, j):
        return np.flatnonzero(self.pair_annotator == j)

    def per_annotator(self):
        return {j: self.pairs_of(j) for j in range(self.num_annotators)}

    def pair_weights(self):
        """Weights giving each example equal mass, split evenly over its annotations."""
        per_example = np.bincount(self.pair_example, minlength=self.m)
        return 1.0 / (self.m * per_example[self.pair_example])

    def class_counts(self):
        return np.bincount(self.y_star, minlength=self.num_classes)

    def balanced(self, seed=0):
        """Subsample examples so every y* class has the size of the rarest one."""
        counts = self.class_counts()
        keep_n = counts[counts > 0].min()
        rng = stream(seed, "distill_balance")
        keep = np.sort(np.concatenate([
            rng.choice(np.flatnonzero(self.y_star == c), size=keep_n, replace=False)
            for c in range(self.num_classes) if counts[c] > 0
        ]))
        remap = -np.ones(self.m, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        sel = remap[self.pair_example] >= 0
        return DistilledSet(self.instance_ids[keep], self.features[keep], self.y_star[keep],
                            remap[self.pair_example[sel]], self.pair_annotator[sel],
                            self.pair_label[sel], self.num_annotators, self.num_classes, self.floor)


def init_classifier(dim, num_classes, hidden=(32, 32), seed=0, tag="classifier"):
    sizes = [dim, *hidden, num_classes]
    acts = ["relu"] * len(hidden) + ["softmax"]
    return tn.init_mlp(sizes, acts, stream(seed, tag))


def train_warmup(crowd, epochs=10, lr=0.05, momentum=0.9, weight_decay=0.0,
                 batch_size=64, hidden=(32, 32), seed=0, history=None):
    """Fit a softmax classifier to every (x_i, noisy label) training pair.

    Per-epoch mean losses are appended to ``history`` when a list is given.
    """
    sel = crowd.mask_split("train")
    if not sel.any():
        raise ConfigError("no training annotations")
    x = crowd.base.features[crowd.instance_ids[sel]]
    y = crowd.noisy_labels[sel]
    net = init_classifier(crowd.base.dim, crowd.num_classes, hidden, seed, "warmup")
    state = tn.SgdState.for_params(net.params(), lr, momentum, weight_decay)
    rng = stream(seed, "warmup_batches")
    for _ in range(epochs):
        total = 0.0
        for idx in tn.minibatches(len(y), batch_size, rng):
            out, cache = tn.forward(net, x[idx])
            losses, g = tn.nll_rows(out, y[idx])
            total += losses.sum()
            params, state = tn.sgd_step(net.params(), tn.backward(net, cache, g / len(idx)), state)
            net = net.with_params(params)
        if history is not None:
            history.append(total / len(y))
    return net


def collect_from_posteriors(posteriors, threshold):
    """Indices with max posterior strictly above ``threshold`` and their argmax."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    c = posteriors.shape[1]
    if not 1.0 / c < threshold <= 1.0:
        raise ConfigError(f"threshold must lie in (1/C, 1], got {threshold}")
    keep = np.flatnonzero(posteriors.max(axis=1) > threshold)
    return keep, posteriors[keep].argmax(axis=1)


def collect_distilled(classifier, crowd, threshold=0.8, floor=5, split="train"):
    """Distill the annotated instances of ``split`` whose warmup posterior clears ``threshold``."""
    sel = crowd.mask_split(split)
    inst_all = crowd.instance_ids[sel]
    candidates = np.unique(inst_all)
    post = tn.forward(classifier, crowd.base.features[candidates])[0]
    keep, y_star = collect_from_posteriors(post, threshold)
    inst = candidates[keep]

    pos = -np.ones(crowd.base.n, dtype=np.int64)
    pos[inst] = np.arange(inst.size)
    pair_example = pos[inst_all]
    ok = pair_example >= 0
    return DistilledSet(
        inst,
        crowd.base.features[inst],
        y_star.astype(np.int64),
        pair_example[ok],
        crowd.annotator_ids[sel][ok],
        crowd.noisy_labels[sel][ok],
        crowd.num_annotators,
        crowd.num_classes,
        floor,
    )


def export_distilled_csv(distilled, path, config_hash=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        fh.write("instance_id,y_star\n")
        for i, y in zip(distilled.instance_ids.tolist(), distilled.y_star.tolist()):
            fh.write(f"{i},{y}\n")
