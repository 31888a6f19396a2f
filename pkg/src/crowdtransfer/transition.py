"""Instance-dependent noise-transition networks.

A transition network is a feature backbone ``g`` followed by a linear head
producing C*C logits; ``T(x)`` is the row-wise softmax of those logits laid
out as a C x C matrix (row = Bayes label, column = noisy label).

Heads are handled in one flat layout, ``theta`` of shape ``(h + 1, C*C)``:
the weight matrix with the bias appended as a last row, applied to the
augmented latent ``[g(x), 1]``. The same layout serves the global head, the
fine-tuned per-annotator heads and the heads produced by the GCN mapper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .distill import PipelineError
from .rng import stream


@dataclass
class TransitionNetwork:
    backbone: tn.MlpNetwork
    head: tn.Layer
    num_classes: int

    def __post_init__(self):
        c2 = self.num_classes**2
        if self.head.weight.shape != (self.backbone.output_dim, c2):
            raise tn.ShapeError(
                f"head must map latent {self.backbone.output_dim} to {c2} logits, "
                f"got {self.head.weight.shape}"
            )

    @property
    def latent_dim(self):
        return self.backbone.output_dim

    @property
    def theta(self):
        return np.vstack([self.head.weight, self.head.bias[None, :]])

    def with_theta(self, theta):
        return TransitionNetwork(
            self.backbone, tn.Layer(theta[:-1].copy(), theta[-1].copy(), "identity"), self.num_classes
        )

    def params(self):
        return self.backbone.params() + [self.head.weight, self.head.bias]

    def with_params(self, params):
        backbone = self.backbone.with_params(params[:-2])
        return TransitionNetwork(backbone, tn.Layer(params[-2].copy(), params[-1].copy()), self.num_classes)

    def latent(self, x):
        return tn.forward(self.backbone, x)[0]

    def augmented_latent(self, x):
        return augment(self.latent(x))


@dataclass
class IndividualHeads:
    thetas: np.ndarray  # (R, h + 1, C*C)
    fallback: np.ndarray  # (R,) bool, True where the global head is reused

    @property
    def flat(self):
        return self.thetas.reshape(self.thetas.shape[0], -1)


def init_transition_network(dim, num_classes, widths=(32, 32), latent=16, seed=0):
    sizes = [dim, *widths, latent]
    backbone = tn.init_mlp(sizes, ["relu"] * (len(sizes) - 1), stream(seed, "transition_backbone"))
    head = tn.glorot_layer(latent, num_classes**2, "identity", stream(seed, "transition_head"))
    return TransitionNetwork(backbone, head, num_classes)


def augment(latent):
    latent = np.atleast_2d(latent)
    return np.hstack([latent, np.ones((latent.shape[0], 1))])


def logits_shared(aug, theta, num_classes):
    return (aug @ theta).reshape(-1, num_classes, num_classes)


def logits_per_pair(aug, thetas, num_classes):
    """Logits when pair ``b`` uses its own head ``thetas[b]``."""
    return np.einsum("bh,bhk->bk", aug, thetas).reshape(-1, num_classes, num_classes)


def row_softmax(logits):
    return tn.softmax_rows(logits)


def predict_transition(net, x):
    """Transition matrices for each row of ``x``: shape (n, C, C)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return row_softmax(logits_shared(net.augmented_latent(x), net.theta, net.num_classes))


def predict_with_theta(aug, theta, num_classes):
    return row_softmax(logits_shared(aug, theta, num_classes))


def selected_row_loss(logits, y_star, noisy, weights):
    """Weighted cross-entropy of ``noisy`` against row ``y_star`` of softmax(logits).

    ``weights`` are per-pair and already normalized. Returns ``(loss, dlogits)``.
    """
    rows = np.arange(len(y_star))
    sel = logits[rows, y_star]  # (B, C)
    logp = tn.log_softmax_rows(sel)
    loss = -np.sum(weights * logp[rows, noisy])
    dsel = np.exp(logp)
    dsel[rows, noisy] -= 1.0
    dsel *= weights[:, None]
    dlogits = np.zeros_like(logits)
    dlogits[rows, y_star] = dsel
    return float(loss), dlogits


def global_loss(net, x, y_star, noisy, weights):
    """Loss and gradients of the global objective w.r.t. ``net.params()``."""
    h, cache = tn.forward(net.backbone, x)
    aug = augment(h)
    logits = logits_shared(aug, net.theta, net.num_classes)
    loss, dlogits = selected_row_loss(logits, y_star, noisy, weights)
    dflat = dlogits.reshape(len(y_star), -1)
    dtheta = aug.T @ dflat
    dh = dflat @ net.head.weight.T
    grads = tn.backward(net.backbone, cache, dh)
    return loss, grads + [dtheta[:-1], dtheta[-1]]


def global_objective(net, distilled):
    """Global empirical risk over all distilled pairs (each example weighted equally)."""
    x = distilled.features[distilled.pair_example]
    y_star = distilled.y_star[distilled.pair_example]
    logits = logits_shared(net.augmented_latent(x), net.theta, net.num_classes)
    return selected_row_loss(logits, y_star, distilled.pair_label, distilled.pair_weights())[0]


def _normalized(w):
    return w / w.sum()


def train_global(distilled, dim=None, net=None, epochs=20, lr=0.05, momentum=0.9,
                 weight_decay=0.0, batch_size=64, widths=(32, 32), latent=16, seed=0):
    """Train backbone and head jointly on the distilled pairs."""
    if distilled.m == 0:
        raise PipelineError("distilled set is empty; cannot train the global transition network")
    if net is None:
        net = init_transition_network(dim or distilled.features.shape[1], distilled.num_classes,
                                      widths, latent, seed)
    x = distilled.features[distilled.pair_example]
    y_star = distilled.y_star[distilled.pair_example]
    noisy = distilled.pair_label
    weights = distilled.pair_weights()
    state = tn.SgdState.for_params(net.params(), lr, momentum, weight_decay)
    rng = stream(seed, "global_batches")
    for _ in range(epochs):
        for idx in tn.minibatches(len(noisy), batch_size, rng):
            _, grads = global_loss(net, x[idx], y_star[idx], noisy[idx], _normalized(weights[idx]))
            params, state = tn.sgd_step(net.params(), grads, state)
            net = net.with_params(params)
    return net


def head_loss(theta, aug, y_star, noisy, weights, num_classes):
    """Loss and gradient w.r.t. one head ``theta`` with a frozen latent."""
    logits = logits_shared(aug, theta, num_classes)
    loss, dlogits = selected_row_loss(logits, y_star, noisy, weights)
    return loss, aug.T @ dlogits.reshape(len(y_star), -1)


def finetune_individual(global_net, distilled, annotator, epochs=5, lr=0.05, momentum=0.9,
                        weight_decay=0.0, batch_size=16, seed=0, aug=None):
    """Fine-tune a copy of the global head on one annotator's distilled pairs.

    Returns the head ``theta`` of shape ``(h + 1, C*C)``, or ``None`` when the
    annotator has fewer pairs than ``distilled.floor`` (the caller reuses the
    global head). The backbone is never touched.
    """
    pairs = distilled.pairs_of(annotator)
    if len(pairs) < distilled.floor:
        return None
    if aug is None:
        aug = global_net.augmented_latent(distilled.features)
    a = aug[distilled.pair_example[pairs]]
    y_star = distilled.y_star[distilled.pair_example[pairs]]
    noisy = distilled.pair_label[pairs]
    theta = global_net.theta.copy()
    state = tn.SgdState.for_params([theta], lr, momentum, weight_decay)
    rng = stream(seed, "finetune", annotator)
    for _ in range(epochs):
        for idx in tn.minibatches(len(pairs), batch_size, rng):
            w = np.full(len(idx), 1.0 / len(idx))
            _, g = head_loss(theta, a[idx], y_star[idx], noisy[idx], w, global_net.num_classes)
            (theta,), state = tn.sgd_step([theta], [g], state)
    return theta


def finetune_all(global_net, distilled, **kwargs):
    aug = global_net.augmented_latent(distilled.features)
    thetas, fallback = [], []
    for j in range(distilled.num_annotators):
        theta = finetune_individual(global_net, distilled, j, aug=aug, **kwargs)
        fallback.append(theta is None)
        thetas.append(global_net.theta.copy() if theta is None else theta)
    return IndividualHeads(np.stack(thetas), np.array(fallback))


def individual_objective(theta, aug, distilled, annotator):
    pairs = distilled.pairs_of(annotator)
    w = np.full(len(pairs), 1.0 / len(pairs))
    return head_loss(theta, aug[distilled.pair_example[pairs]],
                     distilled.y_star[distilled.pair_example[pairs]],
                     distilled.pair_label[pairs], w, distilled.num_classes)[0]
