"""Random small problem instances shared by several test modules."""

import warnings
from types import SimpleNamespace

import numpy as np

from lightgcl.data import InteractionSet, normalize, split
from lightgcl.model import EdgeDropoutMask, init_embeddings
from lightgcl.svd import RsvdConfig, approx_svd
from lightgcl.trainer import TrainBatch


def random_interactions(rng, n_users, n_items, density=0.3):
    """Random bipartite graph where every user and item has at least one edge."""
    dense = rng.random((n_users, n_items)) < density
    dense[np.arange(n_users), rng.integers(n_items, size=n_users)] = True
    dense[rng.integers(n_users, size=n_items), np.arange(n_items)] = True
    u, i = np.nonzero(dense)
    return InteractionSet.from_pairs(n_users, n_items, u, i)


def gradient_instance(seed, max_nodes=8, dim=None, scale=1.0):
    """A full loss configuration with fixed masks, float64 tables."""
    rng = np.random.default_rng(seed)
    n_users, n_items = (int(x) for x in rng.integers(3, max_nodes + 1, size=2))
    s = random_interactions(rng, n_users, n_items, density=float(rng.uniform(0.2, 0.5)))
    adj = normalize(s)
    q = int(rng.integers(1, min(n_users, n_items) + 1))
    with warnings.catch_warnings():
        # tiny random graphs can have rank below q; the reduced factors are fine here
        warnings.simplefilter("ignore", RuntimeWarning)
        factors = approx_svd(adj, RsvdConfig(q=q, seed=seed))
    dim = dim or int(rng.integers(2, 9))
    state = init_embeddings(n_users, n_items, dim, seed, n_layers=int(rng.integers(1, 4)), dtype=np.float64)
    state.user0 *= scale
    state.item0 *= scale
    n = int(rng.integers(1, 9))
    batch = TrainBatch.from_triples(rng.integers(n_users, size=n), rng.integers(n_items, size=n),
                                    rng.integers(n_items, size=n))
    batch.cl_kept_users = rng.random(batch.batch_users.size) < 0.8
    batch.cl_kept_items = rng.random(batch.batch_items.size) < 0.8
    keep = float(rng.choice([1.0, 0.75]))
    mask = EdgeDropoutMask.sample(adj.nnz, keep, rng)
    return SimpleNamespace(adj=adj, factors=factors, state=state, batch=batch, mask=mask, rng=rng)


def fd_report(inst, w, tolerance=1e-4, n_coords=200, seed=0):
    """Analytic gradient of the full loss against central differences, masks held fixed."""
    from lightgcl.model import forward
    from lightgcl.objective import finite_diff_check, hinge_violations, loss_and_grad

    factors = inst.factors if w.lambda1 > 0 else None

    def loss_fn(state):
        forward(state, inst.adj, factors, inst.mask)
        return loss_and_grad(state, factors, inst.batch, w, need_grad=False)[0].total

    def pattern_fn(state):
        return hinge_violations(state, inst.batch) > 0

    forward(inst.state, inst.adj, factors, inst.mask)
    _, grad = loss_and_grad(inst.state, factors, inst.batch, w)
    return finite_diff_check(inst.state, loss_fn, grad, tolerance, n_coords, seed=seed,
                             pattern_fn=pattern_fn)


def svd_neighbor_instance():
    """Three users, three items on a path; item 2 touches only user 2.

    Users 0 and 1 are the contrastive anchors and have no edge to item 2, but
    the rank-2 reconstruction links them to it.
    """
    s = InteractionSet.from_pairs(3, 3, [0, 1, 1, 2, 2], [0, 0, 1, 1, 2])
    adj = normalize(s)
    # rank 1 would make every SVD-view row parallel and the softmax flat
    factors = approx_svd(adj, RsvdConfig(q=2))
    state = init_embeddings(3, 3, 4, seed=1, n_layers=1, dtype=np.float64)
    empty = np.zeros(0, dtype=np.int64)
    batch = TrainBatch(empty, empty, empty, np.array([0, 1]), empty,
                       np.ones(2, bool), np.ones(0, bool))
    return SimpleNamespace(adj=adj, factors=factors, state=state, batch=batch,
                           mask=EdgeDropoutMask.full(adj.nnz))


def metric_instance(seed, max_nodes=50):
    """Integer embeddings: exact dot products and plenty of ties."""
    rng = np.random.default_rng(seed)
    n_users, n_items = (int(x) for x in rng.integers(2, max_nodes + 1, size=2))
    full = random_interactions(rng, n_users, n_items, density=float(rng.uniform(0.1, 0.5)))
    known, test = split(full, 0.3, seed)
    d = int(rng.integers(1, 5))
    e_user = rng.integers(-3, 4, size=(n_users, d)).astype(np.float64)
    e_item = rng.integers(-3, 4, size=(n_items, d)).astype(np.float64)
    return known, test, e_user, e_item
