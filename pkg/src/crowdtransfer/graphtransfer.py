"""Annotator similarity graph and the GCN mapper producing inter-dependent heads.

Pipeline: per-annotator heads -> cosine similarity ``S`` -> k-nearest-neighbour
adjacency ``A`` -> rank-r SVD denoising ``A*`` -> row normalisation ``A_hat``.
A GCN over ``A_hat`` with one-hot node inputs then outputs one transition head
per annotator, so annotators sharing neighbourhoods share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .crowdsim import ConfigError
from .distill import PipelineError
from .rng import stream
from .transition import logits_per_pair, selected_row_loss


class NumericalError(ArithmeticError):
    pass


@dataclass
class SimilarityGraph:
    S: np.ndarray
    A: np.ndarray
    A_star: np.ndarray
    A_hat: np.ndarray
    k: int


def similarity(heads, norm="l2"):
    """Pairwise ``theta_i . theta_j / (|theta_i| |theta_j|)`` over flattened heads."""
    theta = np.asarray(heads, dtype=np.float64).reshape(len(heads), -1)
    if norm == "l2":
        n = np.sqrt(np.einsum("ij,ij->i", theta, theta))
    elif norm == "l1":
        n = np.abs(theta).sum(axis=1)
    else:
        raise ConfigError(f"unknown norm {norm!r}")
    if np.any(n == 0):
        raise NumericalError(f"zero-norm head for annotator(s) {np.flatnonzero(n == 0).tolist()}")
    dots = theta @ theta.T
    s = dots / np.outer(n, n)
    return 0.5 * (s + s.T)


def knn_adjacency(S, k):
    """Row ``i`` marks the ``k`` most similar annotators, always including ``i``.

    Ties go to the lower index.
    """
    S = np.asarray(S, dtype=np.float64)
    r = S.shape[0]
    if not 1 <= k <= r:
        raise ConfigError(f"need 1 <= k <= R (k={k}, R={r})")
    score = S.copy()
    np.fill_diagonal(score, np.inf)
    order = np.argsort(-score, axis=1, kind="stable")[:, :k]
    A = np.zeros((r, r))
    A[np.arange(r)[:, None], order] = 1.0
    return A


def graph_svd_denoise(A, rank, threshold=0.5):
    """Rank-``rank`` SVD reconstruction of ``A``, binarized, with a forced diagonal."""
    A = np.asarray(A, dtype=np.float64)
    r = A.shape[0]
    if not 1 <= rank <= r:
        raise ConfigError(f"need 1 <= rank <= R (rank={rank}, R={r})")
    try:
        u, s, vt = np.linalg.svd(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge (condition number {np.linalg.cond(A):.3g})") from exc
    recon = (u[:, :rank] * s[:rank]) @ vt[:rank]
    A_star = (recon > threshold).astype(np.float64)
    np.fill_diagonal(A_star, 1.0)
    return A_star


def normalize(A_star):
    deg = A_star.sum(axis=1, keepdims=True)
    if np.any(deg == 0):
        raise ConfigError("every node needs at least one neighbour")
    return A_star / deg


def build_graph(heads, k, rank, norm="l2"):
    S = similarity(heads, norm)
    A = knn_adjacency(S, k)
    A_star = graph_svd_denoise(A, rank)
    return SimilarityGraph(S, A, A_star, normalize(A_star), k)


def same_group_edge_fraction(A_star, groups):
    """Share of off-diagonal edges of ``A_star`` joining annotators of one group."""
    off = A_star.astype(bool) & ~np.eye(len(groups), dtype=bool)
    if not off.any():
        return 1.0
    same = groups[:, None] == groups[None, :]
    return float((off & same).sum() / off.sum())


@dataclass
class GcnMapper:
    weights: list
    final_activation: str = "identity"
    hidden_activation: str = field(default="relu")
    base: np.ndarray = None  # optional (h + 1, C*C) head added to every node's output

    def __post_init__(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise tn.ShapeError(f"GCN dims do not chain: {a.shape} -> {b.shape}")
        if self.final_activation not in ("identity", "relu"):
            raise ConfigError(f"unknown final activation {self.final_activation!r}")

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def with_weights(self, weights):
        return GcnMapper([np.array(w, dtype=np.float64) for w in weights],
                         self.final_activation, self.hidden_activation, self.base)


def init_gcn(num_nodes, out_dim, hidden=(64,), final_activation="identity", seed=0, base=None):
    """Glorot-initialised mapper. With ``base`` the GCN output is a residual around that head."""
    rng = stream(seed, "gcn")
    sizes = [num_nodes, *hidden, out_dim]
    weights = [tn.glorot_layer(a, b, "identity", rng).weight for a, b in zip(sizes[:-1], sizes[1:])]
    if base is not None:
        base = np.asarray(base, dtype=np.float64)
        if base.size != out_dim:
            raise tn.ShapeError(f"base head has {base.size} entries, GCN outputs {out_dim}")
    return GcnMapper(weights, final_activation, base=base)


def _act(z, name):
    return np.maximum(z, 0.0) if name == "relu" else z


def gcn_forward(mapper, A_hat, H0=None):
    """Node features of every layer, ``[H0, H1, ..., HL]``, plus a backward cache."""
    r = A_hat.shape[0]
    h = np.eye(r) if H0 is None else np.asarray(H0, dtype=np.float64)
    if h.shape[1] != mapper.weights[0].shape[0]:
        raise tn.ShapeError(f"node features {h.shape} do not match first GCN weight {mapper.weights[0].shape}")
    hs, cache = [h], []
    for l, w in enumerate(mapper.weights):
        agg = A_hat @ h
        z = agg @ w
        act = mapper.final_activation if l == mapper.num_layers - 1 else mapper.hidden_activation
        h = _act(z, act)
        cache.append((agg, z, act))
        hs.append(h)
    return hs, cache


def gcn_backward(mapper, A_hat, cache, d_out):
    grads = [None] * mapper.num_layers
    g = d_out
    for l in range(mapper.num_layers - 1, -1, -1):
        agg, z, act = cache[l]
        if act == "relu":
            g = g * (z > 0)
        grads[l] = agg.T @ g
        if l > 0:
            g = A_hat.T @ (g @ mapper.weights[l].T)
    return grads


def assemble_heads(H_L, latent_dim, num_classes, base=None):
    """Reshape final node features into per-annotator heads ``(R, h + 1, C*C)``."""
    expect = (latent_dim + 1) * num_classes**2
    if H_L.shape[1] != expect:
        raise ConfigError(f"final GCN width {H_L.shape[1]} != (h + 1) * C * C = {expect}")
    heads = H_L.reshape(H_L.shape[0], latent_dim + 1, num_classes**2)
    if base is not None:
        heads = heads + base.reshape(1, latent_dim + 1, num_classes**2)
    return heads


def gcn_heads(mapper, A_hat, latent_dim, num_classes):
    hs, _ = gcn_forward(mapper, A_hat)
    return assemble_heads(hs[-1], latent_dim, num_classes, mapper.base)


def gcn_loss(mapper, A_hat, aug, annotators, y_star, noisy, weights, num_classes):
    """Weighted selected-row cross-entropy through the GCN heads; grads w.r.t. its weights."""
    r = A_hat.shape[0]
    hs, cache = gcn_forward(mapper, A_hat)
    heads = assemble_heads(hs[-1], aug.shape[1] - 1, num_classes, mapper.base)
    logits = logits_per_pair(aug, heads[annotators], num_classes)
    loss, dlogits = selected_row_loss(logits, y_star, noisy, weights)
    outer = np.einsum("bh,bk->bhk", aug, dlogits.reshape(len(noisy), -1)).reshape(len(noisy), -1)
    onehot = np.zeros((r, len(noisy)))
    onehot[annotators, np.arange(len(noisy))] = 1.0
    d_heads = onehot @ outer
    return loss, gcn_backward(mapper, A_hat, cache, d_heads)


def gcn_objective(mapper, A_hat, aug_examples, distilled):
    return gcn_loss(mapper, A_hat, aug_examples[distilled.pair_example], distilled.pair_annotator,
                    distilled.y_star[distilled.pair_example], distilled.pair_label,
                    distilled.pair_weights(), distilled.num_classes)[0]


def train_gcn(mapper, graph, distilled, aug_examples, epochs=30, lr=0.05, momentum=0.9,
              weight_decay=0.0, batch_size=128, seed=0):
    """Learn the GCN weights on all distilled pairs; graph and backbone stay fixed.

    ``aug_examples`` is the augmented latent ``[g(x), 1]`` of each distilled
    example, computed once with the frozen backbone.
    """
    if distilled.m == 0:
        raise PipelineError("distilled set is empty; cannot train the GCN mapper")
    A_hat = graph.A_hat
    aug = aug_examples[distilled.pair_example]
    y_star = distilled.y_star[distilled.pair_example]
    noisy = distilled.pair_label
    ann = distilled.pair_annotator
    weights = distilled.pair_weights()
    state = tn.SgdState.for_params(mapper.weights, lr, momentum, weight_decay)
    rng = stream(seed, "gcn_batches")
    for _ in range(epochs):
        for idx in tn.minibatches(len(noisy), batch_size, rng):
            w = weights[idx] / weights[idx].sum()
            _, grads = gcn_loss(mapper, A_hat, aug[idx], ann[idx], y_star[idx], noisy[idx], w,
                                distilled.num_classes)
            new_w, state = tn.sgd_step(mapper.weights, grads, state)
            mapper = mapper.with_weights(new_w)
    return mapper


@dataclass
class ContractionReport:
    checked: bool
    reason: str = ""
    k: int = 0
    spectral_norm: float = 0.0
    lhs: list = field(default_factory=list)
    rhs: list = field(default_factory=list)

    @property
    def violations(self):
        return [i for i, (a, b) in enumerate(zip(self.lhs, self.rhs)) if a > b + 1e-9]

    @property
    def holds(self):
        return self.checked and not self.violations


def contraction_check(weight, A_hat, H, pairs):
    """Check ``|h'_i - h'_j| <= |(h_i - h_j)/k + (Q_i - Q_j)/k| * |W|_2`` on ReLU layers.

    ``h'`` comes from an actual GCN layer evaluation; the right side is built
    from neighbour sets of ``A_hat``. Neighbour sets exclude the node itself,
    whose own feature enters through the ``h_i / k`` term; ``Q_i`` sums the
    neighbours of ``i`` that are not neighbours of ``j``.
    """
    nbr = A_hat > 0
    deg = nbr.sum(axis=1)
    if np.any(deg != deg[0]) or not np.all(np.diag(nbr)):
        return ContractionReport(False, "graph is not uniform-degree with self-loops")
    k = int(deg[0])
    if not np.allclose(A_hat[nbr], 1.0 / k, rtol=0, atol=1e-15):
        return ContractionReport(False, "A_hat is not the divide-by-k normalisation")
    mapper = GcnMapper([weight], final_activation="relu")
    H_next = gcn_forward(mapper, A_hat, H)[0][1]
    w_norm = float(np.linalg.norm(weight, 2))
    report = ContractionReport(True, k=k, spectral_norm=w_norm)
    for i, j in pairs:
        ni = set(np.flatnonzero(nbr[i])) - {i}
        nj = set(np.flatnonzero(nbr[j])) - {j}
        q_i = sum((H[q] for q in sorted(ni - nj)), np.zeros(H.shape[1]))
        q_j = sum((H[q] for q in sorted(nj - ni)), np.zeros(H.shape[1]))
        rhs = np.linalg.norm((H[i] - H[j]) / k + (q_i - q_j) / k) * w_norm
        report.lhs.append(float(np.linalg.norm(H_next[i] - H_next[j])))
        report.rhs.append(float(rhs))
    return report


def orthogonality_check(weight, A_hat, H, i, j):
    """Premise-checked orthogonality of two post-ReLU node features.

    Returns ``(premise_holds, dot)``. The premise: the aggregated inputs of
    ``i`` and ``j`` have disjoint supports and so do their images under
    ``weight``.
    """
    agg = A_hat @ H
    pre_i, pre_j = agg[i] @ weight, agg[j] @ weight
    disjoint_in = not np.any((agg[i] != 0) & (agg[j] != 0))
    disjoint_out = not np.any((pre_i != 0) & (pre_j != 0))
    out_i, out_j = np.maximum(pre_i, 0.0), np.maximum(pre_j, 0.0)
    return disjoint_in and disjoint_out, float(out_i @ out_j)


def export_edges_csv(matrix, path, config_hash=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        fh.write("src,dst,weight\n")
        for s, d in zip(*np.nonzero(matrix)):
            fh.write(f"{s},{d},{float(matrix[s, d])!r}\n")


def load_edges_csv(path, num_nodes):
    m = np.zeros((num_nodes, num_nodes))
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    if not rows or rows[0].strip() != "src,dst,weight":
        raise ValueError(f"{path}: expected header 'src,dst,weight'")
    for lineno, line in enumerate(rows[1:], start=2):
        try:
            s, d, w = line.strip().split(",")
            m[int(s), int(d)] = float(w)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: malformed edge row {lineno}: {line.strip()!r}") from exc
    return m
