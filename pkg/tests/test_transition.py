import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdtransfer import crowdsim as cs
from crowdtransfer import distill as ds
from crowdtransfer import tensornet as tn
from crowdtransfer import transition as tr


def _distilled_fixture(n=900, q0=None, seed=5, rho=0.3):
    clean = cs.make_blobs(n, 4, 3, 5.0, seed)
    pool = cs.make_pool(9, 3, 3, 4, rho, 0.6, seed)
    if q0 is not None:
        pool.flip_rates[0] = q0
    m = len(cs.annotatable_indices(clean))
    crowd = cs.corrupt(clean, pool, cs.assign_annotators(m, 9, 2, seed), seed)
    warm = ds.train_warmup(crowd, epochs=8, seed=seed)
    return crowd, ds.collect_distilled(warm, crowd, 0.5)


@pytest.fixture(scope="module")
def fixture():
    return _distilled_fixture()


def _zero_head(net):
    return net.with_theta(np.zeros_like(net.theta))


def test_zero_head_is_uniform():
    net = _zero_head(tr.init_transition_network(4, 3, seed=0))
    T = tr.predict_transition(net, np.random.default_rng(0).normal(size=(5, 4)))
    assert np.allclose(T, 1.0 / 3, atol=0, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.floats(0.1, 10.0))
def test_rows_stochastic(seed, c, scale):
    rng = np.random.default_rng(seed)
    net = tr.init_transition_network(3, c, widths=(8,), latent=5, seed=seed)
    net = net.with_theta(net.theta * scale)
    T = tr.predict_transition(net, rng.normal(0, 3, size=(20, 3)))
    assert T.shape == (20, c, c)
    assert np.all(T >= 0)
    assert np.abs(T.sum(-1) - 1).max() <= 1e-9


def test_row_shift_invariance():
    logits = np.random.default_rng(1).normal(size=(1, 3, 3))
    shifted = logits.copy()
    shifted[0, 1] += 7.5
    a, b = tr.row_softmax(logits), tr.row_softmax(shifted)
    assert np.allclose(a, b, atol=1e-15)


def test_shape_mismatch():
    net = tr.init_transition_network(4, 3, seed=0)
    with pytest.raises(tn.ShapeError):
        tr.predict_transition(net, np.zeros((2, 5)))
    with pytest.raises(tn.ShapeError):
        tr.TransitionNetwork(net.backbone, tn.Layer(np.zeros((16, 8)), np.zeros(8)), 3)


def test_init_loss_with_zero_head_is_log_c(fixture):
    _, dist = fixture
    net = _zero_head(tr.init_transition_network(4, 3, seed=0))
    assert tr.global_objective(net, dist) == pytest.approx(np.log(3), abs=1e-12)


def test_objective_matches_independent_loop(fixture):
    _, dist = fixture
    net = tr.init_transition_network(4, 3, seed=2)
    total = 0.0
    per_example = np.bincount(dist.pair_example)
    for p in range(len(dist.pair_label)):
        e = dist.pair_example[p]
        h, _ = tn.forward(net.backbone, dist.features[e : e + 1])
        logits = (h @ net.head.weight + net.head.bias).reshape(3, 3)
        row = tn.softmax_rows(logits[dist.y_star[e]])
        onehot = np.eye(3)[dist.pair_label[p]]
        total += tn.cross_entropy(onehot, row)[0] / (dist.m * per_example[e])
    assert tr.global_objective(net, dist) == pytest.approx(total, abs=1e-10)


def _small_pairs(seed=0, n=7, c=3, d=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y_star = rng.integers(0, c, n)
    noisy = rng.integers(0, c, n)
    w = rng.random(n)
    return x, y_star, noisy, w / w.sum()


def test_global_loss_gradient():
    x, y_star, noisy, w = _small_pairs()
    net = tr.init_transition_network(4, 3, widths=(5,), latent=4, seed=3)

    def loss_fn(params):
        return tr.global_loss(net.with_params(params), x, y_star, noisy, w)

    rep = tn.finite_diff_check(loss_fn, net.params())
    assert rep.passed, rep


def test_head_loss_gradient():
    x, y_star, noisy, w = _small_pairs(1)
    net = tr.init_transition_network(4, 3, widths=(5,), latent=4, seed=4)
    aug = net.augmented_latent(x)

    def loss_fn(params):
        loss, grad = tr.head_loss(params[0], aug, y_star, noisy, w, 3)
        return loss, [grad]

    rep = tn.finite_diff_check(loss_fn, [net.theta])
    assert rep.passed, rep


def test_global_training_without_noise():
    clean = cs.make_blobs(600, 4, 3, 6.0, 1)
    pool = cs.make_pool(6, 3, 3, 4, 0.0, 0.0, 1)
    crowd = cs.corrupt(clean, pool, cs.assign_annotators(len(cs.annotatable_indices(clean)), 6, 2, 1), 1)
    dist = ds.collect_distilled(ds.train_warmup(crowd, epochs=8, seed=1), crowd, 0.5)
    net = tr.train_global(dist, epochs=10, seed=1)
    T = tr.predict_transition(net, dist.features)
    assert T[np.arange(dist.m), dist.y_star, dist.y_star].mean() >= 0.9


def test_train_global_empty():
    empty = ds.DistilledSet(np.array([], int), np.zeros((0, 4)), np.array([], int), np.array([], int),
                            np.array([], int), np.array([], int), 3, 3)
    with pytest.raises(ds.PipelineError):
        tr.train_global(empty, dim=4)


def test_finetune_zero_epochs_is_global(fixture):
    _, dist = fixture
    net = tr.train_global(dist, epochs=2, seed=0)
    theta = tr.finetune_individual(net, dist, 0, epochs=0)
    assert np.array_equal(theta, net.theta)


def test_finetune_freezes_backbone(fixture):
    _, dist = fixture
    net = tr.train_global(dist, epochs=2, seed=0)
    before = [p.copy() for p in net.params()]
    heads = tr.finetune_all(net, dist, epochs=3)
    for a, b in zip(before, net.params()):
        assert np.array_equal(a, b)
    assert not np.array_equal(heads.thetas[0], net.theta)


def test_finetune_fallback(fixture):
    _, dist = fixture
    net = tr.train_global(dist, epochs=1, seed=0)
    dist.floor = 10**6
    try:
        assert tr.finetune_individual(net, dist, 0) is None
        heads = tr.finetune_all(net, dist, epochs=1)
    finally:
        dist.floor = 5
    assert heads.fallback.all()
    assert np.array_equal(heads.thetas[3], net.theta)


def test_finetune_schedule_invariant(fixture):
    _, dist = fixture
    net = tr.train_global(dist, epochs=2, seed=0)
    all_heads = tr.finetune_all(net, dist, epochs=2, seed=7)
    alone = tr.finetune_individual(net, dist, 4, epochs=2, seed=7)
    assert np.array_equal(all_heads.thetas[4], alone)


def test_finetune_reduces_individual_objective(fixture):
    _, dist = fixture
    net = tr.train_global(dist, epochs=5, seed=0)
    aug = net.augmented_latent(dist.features)
    theta = tr.finetune_individual(net, dist, 2, epochs=10, seed=0)
    assert tr.individual_objective(theta, aug, dist, 2) < tr.individual_objective(net.theta, aug, dist, 2)


def test_clean_annotator_diagonal_rises():
    _, dist = _distilled_fixture(n=1500, q0=0.0, rho=0.4)
    net = tr.train_global(dist, epochs=10, seed=5)
    theta = tr.finetune_individual(net, dist, 0, epochs=20, seed=5)
    ex = dist.pair_example[dist.pairs_of(0)]
    aug = net.augmented_latent(dist.features[ex])
    rows = np.arange(len(ex))
    ys = dist.y_star[ex]
    ind = tr.predict_with_theta(aug, theta, 3)[rows, ys, ys].mean()
    glob = tr.predict_with_theta(aug, net.theta, 3)[rows, ys, ys].mean()
    assert ind >= glob
