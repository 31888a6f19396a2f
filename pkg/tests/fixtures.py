"""Small graph fixtures shared by the graph tests and the acceptance suite."""

import numpy as np

from crowdtransfer import graphtransfer as gt

TWO_BLOCK_A_HAT = np.array([
    [0.5, 0.5, 0.0, 0.0],
    [0.5, 0.5, 0.0, 0.0],
    [0.0, 0.0, 0.5, 0.5],
    [0.0, 0.0, 0.5, 0.5],
])


def uniform_degree_graph(num_nodes, k, rng):
    """Random graph where every node has exactly ``k`` neighbours, itself included.

    Nodes are placed on a shuffled ring and linked to the next ``k - 1``
    positions, so neighbourhoods overlap partially.
    """
    order = rng.permutation(num_nodes)
    pos = np.empty(num_nodes, dtype=int)
    pos[order] = np.arange(num_nodes)
    A = np.zeros((num_nodes, num_nodes))
    for i in range(num_nodes):
        for t in range(k):
            A[i, order[(pos[i] + t) % num_nodes]] = 1.0
    return A


def contraction_fixture(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(4, 10))
    k = int(rng.integers(1, r + 1))
    z_in, z_out = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    A_hat = gt.normalize(uniform_degree_graph(r, k, rng))
    H = rng.normal(size=(r, z_in))
    W = rng.normal(size=(z_in, z_out)) * rng.uniform(0.1, 3.0)
    pairs = [(i, j) for i in range(r) for j in range(i + 1, r)]
    return W, A_hat, H, pairs
