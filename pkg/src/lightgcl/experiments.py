"""Desk-scale experiments shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import InteractionSet, normalize, split, synthetic_block_graph
from .evaluation import evaluate
from .model import init_embeddings, propagate_local, propagate_svd
from .svd import RsvdConfig, approx_svd
from .trainer import TrainConfig, full_forward, train


@dataclass(frozen=True)
class DeskSetup:
    """MovieLens-100K-sized block graph (943 users, 1,682 items, about 100K edges)."""

    n_users: int = 943
    n_items: int = 1682
    mean_degree: int = 106
    n_blocks: int = 19
    graph_seed: int = 0
    test_ratio: float = 0.2
    val_ratio: float = 0.05

    def graph(self) -> InteractionSet:
        return synthetic_block_graph(self.n_users, self.n_items, n_blocks=self.n_blocks,
                                     mean_degree=self.mean_degree, seed=self.graph_seed)


@dataclass
class RunOutcome:
    seed: int
    lambda1: float
    recall20: float
    ndcg20: float
    best_epoch: int
    epochs_run: int
    seconds: float


def prepare(setup: DeskSetup, split_seed=0):
    data = setup.graph()
    fit, test = split(data, setup.test_ratio, split_seed)
    fit, val = split(fit, setup.val_ratio, split_seed + 1)
    return data, fit, val, test


def desk_run(cfg: TrainConfig, fit, val, test, factors, adj) -> RunOutcome:
    t0 = time.perf_counter()
    res = train(cfg, fit, adj, factors if cfg.lambda1 > 0 else None, val)
    full_forward(res.state, adj)
    rep = evaluate(res.state, fit.union(val), test, ns=(20,))
    return RunOutcome(cfg.seed, cfg.lambda1, rep.recall[20], rep.ndcg[20], res.best_epoch,
                      res.epochs_run, time.perf_counter() - t0)


def desk_benefit(seeds=range(5), lambda1=1e-7, setup=DeskSetup(), base=TrainConfig(), log=None):
    """Full model vs the lambda1 = 0 ablation on the same split, one pair of runs per seed.

    Both runs of a pair share the seed, so they see identical batches and
    initial tables; only the contrastive term differs.
    """
    _, fit, val, test = prepare(setup)
    adj = normalize(fit)
    factors = approx_svd(adj, RsvdConfig(q=base.q))
    pairs = []
    for seed in seeds:
        full = desk_run(replace(base, seed=seed, lambda1=lambda1), fit, val, test, factors, adj)
        ablation = desk_run(replace(base, seed=seed, lambda1=0.0), fit, val, test, factors, adj)
        pairs.append((full, ablation))
        if log is not None:
            log(f"seed={seed} full={full.recall20:.5f} ablation={ablation.recall20:.5f} "
                f"gap={full.recall20 - ablation.recall20:+.5f} "
                f"({full.seconds:.0f}s + {ablation.seconds:.0f}s)")
    return pairs


def time_svd_view(n_users, n_items, qs, dim=32, n_layers=2, repeats=15, seed=0, mean_degree=10):
    """Median wall time of one SVD-view propagation (all layers) for each rank in ``qs``.

    Ranks are timed round-robin within each repetition so slow drifts in
    machine load hit every q alike.
    """
    s = synthetic_block_graph(n_users, n_items, mean_degree=mean_degree, seed=seed)
    adj = normalize(s)
    factors = {q: approx_svd(adj, RsvdConfig(q=q, seed=seed)) for q in qs}
    state = init_embeddings(s.n_users, s.n_items, dim, seed, n_layers)
    propagate_local(state, adj)
    times = {q: [] for q in qs}
    for _ in range(repeats):
        for q in qs:
            t0 = time.perf_counter()
            propagate_svd(state, factors[q])
            times[q].append(time.perf_counter() - t0)
    return [float(np.median(times[q])) for q in qs]


def time_approx_svd(n_users, n_items, mean_degree, q=5, repeats=5, seed=0):
    """(nnz, median seconds) for approx_svd on a block graph."""
    s = synthetic_block_graph(n_users, n_items, mean_degree=mean_degree, seed=seed)
    adj = normalize(s)
    cfg = RsvdConfig(q=q, seed=seed)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        approx_svd(adj, cfg)
        times.append(time.perf_counter() - t0)
    return adj.nnz, float(np.median(times))


def linear_fit_r2(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(1.0 - resid @ resid / np.sum((y - y.mean()) ** 2))
