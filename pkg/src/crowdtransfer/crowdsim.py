"""Synthetic crowds with annotator- and instance-dependent label noise.

Clean data are Gaussian blobs. Annotators are split into ``G`` equal groups;
each group owns one set of class projection matrices, so annotators of a
group flip labels in the same instance-dependent directions, while each
annotator keeps its own flip rate ``q_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream

SPLITS = ("train", "val", "test")
MAX_REJECTION_ATTEMPTS = 10**6


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class CleanDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int, -1 if withheld
    split: np.ndarray  # (n,) str in SPLITS
    num_classes: int

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def indices(self, split):
        return np.flatnonzero(self.split == split)


@dataclass
class AnnotatorPool:
    num_annotators: int
    num_groups: int
    rho: float
    rho_max: float
    flip_rates: np.ndarray  # (R,)
    projections: np.ndarray  # (G, C, d, C); projections[g, y] maps x to flip scores

    def __post_init__(self):
        if self.num_annotators % self.num_groups:
            raise ConfigError("number of annotators must be divisible by the group count")
        if np.any(self.flip_rates < 0) or np.any(self.flip_rates > self.rho_max):
            raise ConfigError("flip rates must lie in [0, rho_max]")

    @property
    def group_size(self):
        return self.num_annotators // self.num_groups

    @property
    def group_of(self):
        return np.arange(self.num_annotators) // self.group_size


@dataclass
class CrowdDataset:
    base: CleanDataset
    num_annotators: int
    # flat annotation triples, sorted by (instance, annotator)
    instance_ids: np.ndarray
    annotator_ids: np.ndarray
    noisy_labels: np.ndarray
    # flip distribution each annotation was drawn from, (n_annotations, C); evaluation only
    true_flip: np.ndarray | None = None

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def mean_annotations(self):
        annotated = np.unique(self.instance_ids)
        return len(self.instance_ids) / max(len(annotated), 1)

    def annotations_of(self, i):
        sel = self.instance_ids == i
        return list(zip(self.annotator_ids[sel].tolist(), self.noisy_labels[sel].tolist()))

    def mask_split(self, split):
        """Boolean mask over annotations whose instance is in ``split``."""
        return self.base.split[self.instance_ids] == split


def make_blobs(n, d, num_classes, class_sep=4.0, seed=0, split_fractions=(0.8, 0.1, 0.1)):
    """Balanced isotropic Gaussian clusters with centers at least ``class_sep`` apart."""
    if n < num_classes:
        raise ConfigError(f"need n >= C (got n={n}, C={num_classes})")
    if d < 2:
        raise ConfigError("feature dimension must be at least 2")
    rng = stream(seed, "blobs")
    if num_classes <= d:
        # scaled simplex corners: every pairwise distance equals class_sep
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
        centers = (class_sep / np.sqrt(2.0)) * basis[:, :num_classes].T
    else:
        centers = rng.standard_normal((num_classes, d))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        min_dist = dist[~np.eye(num_classes, dtype=bool)].min()
        centers *= class_sep / min_dist
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    features = centers[labels] + rng.standard_normal((n, d))

    n_train = int(round(split_fractions[0] * n))
    n_val = int(round(split_fractions[1] * n))
    split = np.array(["test"] * n, dtype=object)
    order = rng.permutation(n)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "val"
    return CleanDataset(features, labels.astype(np.int64), split.astype(str), num_classes)


def sample_flip_rates(num_annotators, rho, rho_max, seed=0, scale=0.1):
    """Draw one flip rate per annotator from N(rho, scale^2) truncated to [0, rho_max]."""
    if not 0 <= rho <= rho_max <= 1:
        raise ConfigError("need 0 <= rho <= rho_max <= 1")
    if rho_max == 0:
        return np.zeros(num_annotators)  # degenerate interval, nothing to sample
    rng = stream(seed, "flip_rates")
    out = np.empty(num_annotators)
    filled, attempts = 0, 0
    while filled < num_annotators:
        need = num_annotators - filled
        draws = rng.normal(rho, scale, size=max(2 * need, 16))
        attempts += draws.size
        ok = draws[(draws >= 0) & (draws <= rho_max)][:need]
        out[filled : filled + ok.size] = ok
        filled += ok.size
        if attempts > MAX_REJECTION_ATTEMPTS and filled < num_annotators:
            raise ConfigError("truncated-normal rejection sampling exceeded its attempt cap")
    return out


def sample_projections(num_groups, num_classes, dim, seed=0):
    """Per-group standard-normal projections, shape (G, C, d, C)."""
    rng = stream(seed, "projections")
    return rng.standard_normal((num_groups, num_classes, dim, num_classes))


def flip_scores(x, y, projection):
    """Score vector ``x @ projection[y]`` over the C candidate labels."""
    return np.asarray(x, dtype=np.float64) @ projection[y]


def flip_distribution_from_scores(scores, y, q):
    """Spread mass ``q`` over the non-``y`` classes by softmax of ``scores``."""
    s = np.array(scores, dtype=np.float64)
    s[y] = -np.inf
    s = s - s[np.isfinite(s)].max()
    e = np.exp(s)
    p = q * e / e.sum()
    p[y] = 1.0 - q
    return p


def instance_flip_distribution(x, y, projection, q):
    """Noisy-label distribution for one instance with true class ``y``.

    ``projection`` is one group's ``(C, d, C)`` array. The true class keeps
    probability ``1 - q``; the remaining ``q`` follows ``softmax(x @ projection[y])``
    restricted to the other classes.
    """
    if not 0 <= q <= 1:
        raise ConfigError("flip rate must lie in [0, 1]")
    return flip_distribution_from_scores(flip_scores(x, y, projection), y, q)


def transition_matrices(features, projection, q):
    """Ground-truth C x C transition matrix for each row of ``features``."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    num_classes = projection.shape[0]
    scores = np.einsum("nd,ydk->nyk", x, projection)
    eye = np.eye(num_classes, dtype=bool)
    scores = np.where(eye[None], -np.inf, scores)
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    t = q * e / e.sum(axis=2, keepdims=True)
    t[:, eye] = 1.0 - q
    return t


def assign_annotators(n, num_annotators, mean_annotations, seed=0):
    """Pick who labels what.

    Every instance first gets one uniformly random annotator; then each
    annotator takes ``floor((r - 1) * n / R)`` further distinct instances.
    Returns ``(instance_ids, annotator_ids)`` without duplicate pairs, sorted.
    """
    if mean_annotations < 1:
        raise ConfigError("mean annotations per instance must be at least 1")
    if mean_annotations > num_annotators:
        raise ConfigError("mean annotations per instance cannot exceed the number of annotators")
    rng = stream(seed, "assignment")
    first = rng.integers(0, num_annotators, size=n)
    extra = int(np.floor((mean_annotations - 1) * n / num_annotators))
    inst = [np.arange(n)]
    ann = [first]
    if extra > 0:
        for j in range(num_annotators):
            chosen = rng.choice(n, size=min(extra, n), replace=False)
            inst.append(chosen)
            ann.append(np.full(chosen.size, j))
    inst = np.concatenate(inst)
    ann = np.concatenate(ann)
    pairs = np.unique(inst.astype(np.int64) * num_annotators + ann)
    return pairs // num_annotators, pairs % num_annotators


def make_pool(num_annotators, num_groups, num_classes, dim, rho, rho_max, seed=0):
    if num_annotators % num_groups:
        raise ConfigError("number of annotators must be divisible by the group count")
    return AnnotatorPool(
        num_annotators,
        num_groups,
        rho,
        rho_max,
        sample_flip_rates(num_annotators, rho, rho_max, seed),
        sample_projections(num_groups, num_classes, dim, seed),
    )


def corrupt(clean, pool, assignment, seed=0):
    """Draw a noisy label for each assigned (instance, annotator) pair.

    ``assignment`` indexes into the non-test instances of ``clean`` (train
    then val order, as returned by ``annotatable_indices``). The test split
    receives no annotations.
    """
    local_inst, ann = assignment
    ann = np.asarray(ann)
    if ann.size and (ann.min() < 0 or ann.max() >= pool.num_annotators):
        raise DataError("assignment references an unknown annotator")
    idx = annotatable_indices(clean)
    inst = idx[np.asarray(local_inst)]
    order = np.lexsort((ann, inst))
    inst, ann = inst[order], ann[order]

    groups = pool.group_of[ann]
    scores = np.einsum(
        "nd,ndk->nk",
        clean.features[inst],
        pool.projections[groups, clean.labels[inst]],
    )
    y = clean.labels[inst]
    q = pool.flip_rates[ann]
    p = _flip_rows(scores, y, q)

    rng = stream(seed, "corrupt")
    u = rng.random(len(inst))
    cdf = np.cumsum(p, axis=1)
    noisy = np.minimum((u[:, None] >= cdf).sum(axis=1), clean.num_classes - 1)
    return CrowdDataset(clean, pool.num_annotators, inst, ann, noisy.astype(np.int64), p)


def _flip_rows(scores, y, q):
    rows = np.arange(len(y))
    s = scores.copy()
    s[rows, y] = -np.inf
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = q[:, None] * e / e.sum(axis=1, keepdims=True)
    p[rows, y] = 1.0 - q
    return p


def annotatable_indices(clean):
    return np.concatenate([clean.indices("train"), clean.indices("val")])


def simulate(n, d, num_classes, class_sep, num_annotators, num_groups, rho, rho_max,
             mean_annotations, seed=0):
    """Full generation: blobs, pool, assignment and corruption."""
    clean = make_blobs(n, d, num_classes, class_sep, seed)
    pool = make_pool(num_annotators, num_groups, num_classes, d, rho, rho_max, seed)
    m = len(annotatable_indices(clean))
    assignment = assign_annotators(m, num_annotators, mean_annotations, seed)
    return corrupt(clean, pool, assignment, seed), pool
