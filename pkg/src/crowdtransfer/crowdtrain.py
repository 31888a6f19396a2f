"""Loss-corrected classifier training, aggregation baselines and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .crowdsim import ConfigError, DataError, transition_matrices
from .distill import init_classifier
from .graphtransfer import assemble_heads, gcn_backward, gcn_forward
from .rng import stream
from .transition import logits_per_pair, row_softmax

STOCHASTIC_TOL = 1e-9


def _check_stochastic(T):
    if np.any(T < 0) or np.any(np.abs(T.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
        raise tn.ContractError("transition matrix must be row-stochastic")


def forward_corrected_loss(f_out, T, label):
    """Cross-entropy of ``label`` against the noisy posterior ``f_out @ T``.

    Returns ``(loss, dloss/df_out, dloss/dT)``.
    """
    f = np.asarray(f_out, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_stochastic(T)
    noisy = f @ T
    p = max(noisy[label], tn.EPS)
    d_f = -T[:, label] / p
    d_T = np.zeros_like(T)
    d_T[:, label] = -f / p
    return float(-np.log(p)), d_f, d_T


def corrected_nll(f, T, labels, weights):
    """Batched weighted forward-corrected loss; ``T`` has shape (B, C, C)."""
    rows = np.arange(len(labels))
    noisy = np.einsum("bc,bck->bk", f, T)
    p = np.maximum(noisy[rows, labels], tn.EPS)
    loss = -np.sum(weights * np.log(p))
    coef = weights / p
    d_f = -T[rows, :, labels] * coef[:, None]
    d_T = np.zeros_like(T)
    d_T[rows, :, labels] = -f * coef[:, None]
    return float(loss), d_f, d_T


@dataclass
class HeadSource:
    """Where per-annotator transition matrices come from during classifier training.

    ``kind`` is one of ``identity`` (no correction), ``global``, ``individual``
    or ``interdependent``. The last may carry the GCN mapper and ``A_hat`` so
    its weights can be revised jointly with the classifier.
    """

    kind: str
    backbone: object = None  # TransitionNetwork whose latent feeds the heads
    thetas: np.ndarray = None  # (R, h + 1, C*C)
    mapper: object = None
    A_hat: np.ndarray = None

    def transitions(self, x, annotators, num_classes):
        if self.kind == "identity":
            return np.broadcast_to(np.eye(num_classes), (len(annotators), num_classes, num_classes)).copy()
        aug = self.backbone.augmented_latent(x)
        return row_softmax(logits_per_pair(aug, self.thetas[annotators], num_classes))


def classifier_loss(net, x, T, labels, weights):
    """Weighted forward-corrected loss of a batch and its gradients w.r.t. ``net.params()``."""
    f, cache = tn.forward(net, x)
    loss, d_f, _ = corrected_nll(f, T, labels, weights)
    return loss, tn.backward(net, cache, d_f)


def joint_loss(net, mapper, A_hat, x, aug, annotators, labels, weights, num_classes):
    """Forward-corrected loss with GCN heads; gradients for the classifier and the GCN weights."""
    f, cache = tn.forward(net, x)
    hs, gcache = gcn_forward(mapper, A_hat)
    heads = assemble_heads(hs[-1], aug.shape[1] - 1, num_classes, mapper.base)
    T = row_softmax(logits_per_pair(aug, heads[annotators], num_classes))
    loss, d_f, d_T = corrected_nll(f, T, labels, weights)
    b = len(labels)
    d_logits = T * (d_T - np.sum(d_T * T, axis=-1, keepdims=True))
    outer = np.einsum("bh,bk->bhk", aug, d_logits.reshape(b, -1)).reshape(b, -1)
    onehot = np.zeros((heads.shape[0], b))
    onehot[annotators, np.arange(b)] = 1.0
    g_w = gcn_backward(mapper, A_hat, gcache, onehot @ outer)
    return loss, tn.backward(net, cache, d_f), g_w


def _lr_at(epoch, base_lr, milestones):
    return base_lr * 0.1 ** sum(epoch >= m for m in milestones)


def train_classifier(crowd, source=None, epochs=30, lr=0.05, momentum=0.9, weight_decay=1e-4,
                     batch_size=64, hidden=(32, 32), lr_milestones=(), seed=0,
                     joint_revision=False, revision_lr_scale=0.1):
    """Minimise the forward-corrected loss over all training annotations.

    Each instance carries equal weight, shared evenly among its annotations.
    Returns ``(classifier, source)``; ``source`` is a new object with revised
    GCN weights when ``joint_revision`` is on and the input one otherwise.
    """
    source = source or HeadSource("identity")
    c = crowd.num_classes
    if source.kind != "identity":
        if source.thetas is None or source.thetas.shape[0] != crowd.num_annotators:
            raise ConfigError("transition heads missing for some annotators")
    if joint_revision and (source.mapper is None or source.A_hat is None):
        raise ConfigError("joint revision needs a GCN head source")

    sel = crowd.mask_split("train")
    inst = crowd.instance_ids[sel]
    ann = crowd.annotator_ids[sel]
    labels = crowd.noisy_labels[sel]
    x = crowd.base.features[inst]
    per_inst = np.bincount(inst, minlength=crowd.base.n)[inst]
    weights = 1.0 / per_inst

    if joint_revision:
        aug = source.backbone.augmented_latent(x)
        mapper = source.mapper
        rev_state = tn.SgdState.for_params(mapper.weights, lr * revision_lr_scale, momentum)
    else:
        T_all = source.transitions(x, ann, c)

    net = init_classifier(crowd.base.dim, c, hidden, seed, "classifier")
    state = tn.SgdState.for_params(net.params(), lr, momentum, weight_decay)
    rng = stream(seed, "classifier_batches")
    for epoch in range(epochs):
        state.learning_rate = _lr_at(epoch, lr, lr_milestones)
        if joint_revision:
            rev_state.learning_rate = _lr_at(epoch, lr, lr_milestones) * revision_lr_scale
        for idx in tn.minibatches(len(labels), batch_size, rng):
            w = weights[idx] / weights[idx].sum()
            if joint_revision:
                _, g_net, g_w = joint_loss(net, mapper, source.A_hat, x[idx], aug[idx], ann[idx],
                                           labels[idx], w, c)
                new_w, rev_state = tn.sgd_step(mapper.weights, g_w, rev_state)
                mapper = mapper.with_weights(new_w)
            else:
                _, g_net = classifier_loss(net, x[idx], T_all[idx], labels[idx], w)
            params, state = tn.sgd_step(net.params(), g_net, state)
            net = net.with_params(params)

    if joint_revision:
        heads = assemble_heads(gcn_forward(mapper, source.A_hat)[0][-1], aug.shape[1] - 1, c, mapper.base)
        source = HeadSource(source.kind, source.backbone, heads, mapper, source.A_hat)
    return net, source


def train_on_labels(features, labels, num_classes, epochs=30, lr=0.05, momentum=0.9,
                    weight_decay=1e-4, batch_size=64, hidden=(32, 32), lr_milestones=(), seed=0):
    """Plain cross-entropy training on one label per instance (aggregation baselines)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    net = init_classifier(x.shape[1], num_classes, hidden, seed, "classifier")
    state = tn.SgdState.for_params(net.params(), lr, momentum, weight_decay)
    rng = stream(seed, "classifier_batches")
    for epoch in range(epochs):
        state.learning_rate = _lr_at(epoch, lr, lr_milestones)
        for idx in tn.minibatches(len(labels), batch_size, rng):
            f, cache = tn.forward(net, x[idx])
            _, g = tn.nll_rows(f, labels[idx])
            params, state = tn.sgd_step(net.params(), tn.backward(net, cache, g / len(idx)), state)
            net = net.with_params(params)
    return net


@dataclass
class AggregatedLabels:
    instance_ids: np.ndarray
    labels: np.ndarray
    method: str
    posterior: np.ndarray = None


@dataclass
class DsModel:
    prior: np.ndarray  # (C,)
    confusion: np.ndarray  # (R, C, C), row = true class, column = given label
    log_likelihood: list = None  # penalised marginal log-likelihood after each M-step
    iterations: int = 0


def majority_vote(labels, num_classes=None):
    """Most frequent label; ties go to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("majority vote needs at least one annotation")
    counts = np.bincount(labels, minlength=num_classes or 0)
    return int(np.argmax(counts))


def _vote_matrix(item, labels, n_items, num_classes):
    votes = np.zeros((n_items, num_classes))
    np.add.at(votes, (item, labels), 1.0)
    return votes


def majority_vote_all(crowd, split="train"):
    sel = crowd.mask_split(split)
    items, item = np.unique(crowd.instance_ids[sel], return_inverse=True)
    votes = _vote_matrix(item, crowd.noisy_labels[sel], len(items), crowd.num_classes)
    return AggregatedLabels(items, votes.argmax(axis=1), "mv")


def _ds_loglik_terms(item, annotator, labels, prior, confusion, n_items):
    """Per-item, per-class ``log pi_c + sum_j log Pi^j[c, label]``."""
    log_joint = np.tile(np.log(prior), (n_items, 1))
    np.add.at(log_joint, item, np.log(confusion[annotator, :, labels]))
    return log_joint


def ds_penalised_loglik(item, annotator, labels, prior, confusion, n_items, alpha):
    log_joint = _ds_loglik_terms(item, annotator, labels, prior, confusion, n_items)
    mx = log_joint.max(axis=1, keepdims=True)
    marginal = float(np.sum(mx[:, 0] + np.log(np.exp(log_joint - mx).sum(axis=1))))
    return marginal + alpha * (np.log(prior).sum() + np.log(confusion).sum())


def ds_em_arrays(item, annotator, labels, n_items, num_annotators, num_classes,
                 max_iters=100, tol=1e-6, alpha=0.01, fixed_confusion=None):
    """Dawid-Skene EM with additive smoothing ``alpha`` (a Dirichlet(alpha + 1) prior).

    Posteriors start from majority-vote one-hots. With ``fixed_confusion`` only
    the class prior is re-estimated. Returns ``(DsModel, posterior)``.
    """
    item = np.asarray(item)
    annotator = np.asarray(annotator)
    labels = np.asarray(labels)
    if item.size == 0:
        raise DataError("no annotations to aggregate")
    votes = _vote_matrix(item, labels, n_items, num_classes)
    post = np.eye(num_classes)[votes.argmax(axis=1)]
    prior = confusion = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        new_prior = (alpha + post.sum(axis=0)) / (num_classes * alpha + n_items)
        if fixed_confusion is None:
            counts = np.zeros((num_annotators, num_classes, num_classes))
            np.add.at(counts, (annotator, slice(None), labels), post[item])
            new_conf = (alpha + counts) / (num_classes * alpha + counts.sum(axis=2, keepdims=True))
        else:
            new_conf = np.asarray(fixed_confusion, dtype=np.float64)
        change = np.inf
        if prior is not None:
            change = max(np.abs(new_prior - prior).max(), np.abs(new_conf - confusion).max())
        prior, confusion = new_prior, new_conf

        with np.errstate(divide="ignore"):
            log_joint = _ds_loglik_terms(item, annotator, labels, prior, confusion, n_items)
        mx = log_joint.max(axis=1, keepdims=True)
        post = np.exp(log_joint - mx)
        post /= post.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            history.append(ds_penalised_loglik(item, annotator, labels, prior, confusion, n_items, alpha))
        if change < tol:
            break
    return DsModel(prior, confusion, history, it), post


def dawid_skene_em(crowd, max_iters=100, tol=1e-6, alpha=0.01, split="train"):
    sel = crowd.mask_split(split)
    items, item = np.unique(crowd.instance_ids[sel], return_inverse=True)
    model, post = ds_em_arrays(item, crowd.annotator_ids[sel], crowd.noisy_labels[sel], len(items),
                               crowd.num_annotators, crowd.num_classes, max_iters, tol, alpha)
    return model, AggregatedLabels(items, post.argmax(axis=1), "ds", post)


def accuracy(classifier, clean, split="test"):
    """Fraction of ``split`` predicted correctly; ``classifier`` is a network or a probability function."""
    idx = clean.indices(split)
    if idx.size == 0:
        raise DataError(f"split {split!r} is empty")
    if np.any(clean.labels[idx] < 0):
        raise DataError(f"split {split!r} has withheld labels")
    x = clean.features[idx]
    probs = classifier(x) if callable(classifier) else tn.forward(classifier, x)[0]
    pred = np.asarray(probs).argmax(axis=1)
    return float(np.mean(pred == clean.labels[idx]))


def row_l1_error(T_est, T_true):
    """Mean over matrices of (1/C) * sum over rows of the row-wise L1 distance."""
    T_est = np.asarray(T_est)
    T_true = np.asarray(T_true)
    c = T_true.shape[-1]
    return float(np.mean(np.abs(T_est - T_true).sum(axis=-1).sum(axis=-1) / c))


def sample_pairs(crowd, n_samples, seed=0, split="train"):
    """Uniform (instance, annotator) pairs for transition-error evaluation."""
    rng = stream(seed, "transition_eval")
    idx = crowd.base.indices(split)
    inst = rng.choice(idx, size=n_samples)
    ann = rng.integers(0, crowd.num_annotators, size=n_samples)
    return inst, ann


def true_transitions(pool, features, annotators):
    out = np.empty((len(annotators), pool.projections.shape[1], pool.projections.shape[1]))
    groups = pool.group_of[annotators]
    for j in np.unique(annotators):
        sel = annotators == j
        out[sel] = transition_matrices(features[sel], pool.projections[groups[sel][0]], pool.flip_rates[j])
    return out


def transition_error(source, pool, crowd, n_samples=2000, seed=0):
    """Mean per-row L1 error of estimated transitions on sampled (x, annotator) pairs."""
    inst, ann = sample_pairs(crowd, n_samples, seed)
    x = crowd.base.features[inst]
    est = source.transitions(x, ann, crowd.num_classes)
    return row_l1_error(est, true_transitions(pool, x, ann))


def true_row_error(source, pool, crowd, n_samples=2000, seed=0):
    """L1 error on the row of each sampled instance's true class only."""
    inst, ann = sample_pairs(crowd, n_samples, seed)
    x = crowd.base.features[inst]
    y = crowd.base.labels[inst]
    rows = np.arange(len(y))
    est = source.transitions(x, ann, crowd.num_classes)[rows, y]
    return float(np.mean(np.abs(est - true_transitions(pool, x, ann)[rows, y]).sum(axis=1)))

