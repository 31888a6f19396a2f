"""Dense feedforward networks with hand-written backward passes.

Matrices are plain float64 numpy arrays. A layer computes
``act(X @ W + b)`` with ``W`` of shape ``(fan_in, fan_out)``, so weights are
stored input-rows by output-columns and consecutive layers chain on
``W[i].shape[1] == W[i + 1].shape[0]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")
EPS = 1e-12


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass
class MlpNetwork:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ContractError("softmax is only allowed on the final layer")

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[1]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_params(self, params):
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list length does not match network")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError("parameter shapes do not match network")
            layers.append(Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), layer.activation))
        return MlpNetwork(layers)

    def copy(self):
        return self.with_params(self.params())


def glorot_layer(fan_in, fan_out, activation, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Layer(w, np.zeros(fan_out), activation)


def init_mlp(sizes, activations, rng):
    """Build a network with layer widths ``sizes`` (input first).

    ``activations`` has one entry per layer, i.e. ``len(sizes) - 1`` entries.
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    layers = [
        glorot_layer(a, b, act, rng)
        for a, b, act in zip(sizes[:-1], sizes[1:], activations)
    ]
    return MlpNetwork(layers)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax_rows(z)
    return z


def forward(net, batch):
    """Run ``batch`` (b x d_in) through ``net``; return (output, cache)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"batch shape {x.shape} incompatible with input dim {net.input_dim}")
    cache = []
    for layer in net.layers:
        z = x @ layer.weight + layer.bias
        a = _activate(z, layer.activation)
        cache.append((x, z, a))
        x = a
    return x, cache


def backward(net, cache, loss_grad, return_input_grad=False):
    """Gradients of a scalar loss given dL/d(output).

    Returns ``[dW0, db0, dW1, db1, ...]`` matching ``net.params()``; with
    ``return_input_grad`` also dL/d(batch).
    """
    if cache is None or len(cache) != len(net.layers):
        raise UsageError("backward() needs the cache produced by forward() on this network")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != cache[-1][2].shape:
        raise ShapeError(f"loss_grad shape {g.shape} != output shape {cache[-1][2].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x, z, a = cache[i]
        if layer.activation == "relu":
            g = g * (z > 0)
        elif layer.activation == "softmax":
            g = a * (g - np.sum(g * a, axis=1, keepdims=True))
        grads[2 * i] = x.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or return_input_grad:
            g = g @ layer.weight.T
    if return_input_grad:
        return grads, g
    return grads


def cross_entropy(target_onehot, probs):
    """Cross-entropy of one probability vector against a one-hot target.

    Returns ``(loss, dloss/dprobs)``; probabilities are clamped at 1e-12.
    """
    t = np.asarray(target_onehot, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeError("target and probs must be vectors of equal length")
    if not (np.all((t == 0) | (t == 1)) and t.sum() == 1):
        raise ContractError("target must be one-hot")
    k = int(np.argmax(t))
    pk = max(p[k], EPS)
    grad = np.zeros_like(p)
    grad[k] = -1.0 / pk
    return float(-np.log(pk)), grad


def nll_rows(probs, labels):
    """Row-wise cross-entropy for integer labels: (losses, dloss/dprobs)."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(p.shape[0])
    picked = np.maximum(p[rows, labels], EPS)
    grad = np.zeros_like(p)
    grad[rows, labels] = -1.0 / picked
    return -np.log(picked), grad


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be non-negative")

    @classmethod
    def for_params(cls, params, learning_rate, momentum=0.9, weight_decay=0.0):
        return cls(learning_rate, momentum, weight_decay, [np.zeros_like(p) for p in params])


def sgd_step(params, grads, state):
    """One momentum-SGD step.

    ``v <- momentum * v + (grad + weight_decay * param)``, then
    ``param <- param - lr * v``. Returns ``(new_params, new_state)``; inputs
    are left untouched.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError("params, grads and velocity lists differ in length")
    new_params, new_vel = [], []
    for p, g, v in zip(params, grads, state.velocity):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v2 = state.momentum * v + (g + state.weight_decay * p)
        new_vel.append(v2)
        new_params.append(p - state.learning_rate * v2)
    return new_params, dataclasses.replace(state, velocity=new_vel)


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    worst: tuple = ()
    message: str = ""


def finite_diff_check(loss_fn, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` shaped like
    ``params``. Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    if not step > 0:
        raise ContractError("finite-difference step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        return FiniteDiffReport(False, float("inf"), 0, message="non-finite loss at base point")
    worst_err, worst, n = 0.0, (), 0
    for pi, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            f_plus = loss_fn(params)[0]
            p[idx] = orig - step
            f_minus = loss_fn(params)[0]
            p[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return FiniteDiffReport(False, float("inf"), n, (pi, idx), "non-finite loss while probing")
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = float(grads[pi][idx])
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            n += 1
            if err > worst_err:
                worst_err, worst = err, (pi, idx)
    return FiniteDiffReport(worst_err < tol, worst_err, n, worst)


def minibatches(n, batch_size, rng):
    """Shuffled index batches covering ``range(n)`` once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
