"""Batch samplers, node dropout, Adam, and the training loop with early stopping."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import InteractionSet, SparseBipartite
from .errors import ConfigError, NumericalError
from .evaluation import evaluate_embeddings
from .model import EdgeDropoutMask, EmbeddingState, forward, init_embeddings
from .objective import LossWeights, loss_and_grad
from .svd import LowRankFactors

log = logging.getLogger(__name__)

SAMPLERS = ("per_interaction", "per_user")
TRAIN_LOG_COLUMNS = ("epoch", "batch", "ranking", "cl_user", "cl_item", "reg", "total")
VAL_LOG_COLUMNS = ("epoch", "recall@20", "ndcg@20")


@dataclass
class TrainConfig:
    dim: int = 32
    n_layers: int = 2
    batch_size: int = 256
    q: int = 5
    lambda1: float = 1e-7
    lambda2: float = 1e-5
    tau: float = 0.5
    dropout: float = 0.25
    sampler: str = "per_interaction"
    samples_per_user: int = 1
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    patience: int = 10
    cl_skip_layer0: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("dim", "n_layers", "batch_size", "q", "samples_per_user", "epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.weights  # validates tau and lambdas

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.tau, self.cl_skip_layer0)


@dataclass
class TrainBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    batch_users: np.ndarray
    batch_items: np.ndarray
    cl_kept_users: np.ndarray | None = None
    cl_kept_items: np.ndarray | None = None

    @classmethod
    def from_triples(cls, users, pos, neg):
        users = np.asarray(users, dtype=np.int64)
        pos = np.asarray(pos, dtype=np.int64)
        neg = np.asarray(neg, dtype=np.int64)
        bu = np.unique(users)
        bi = np.unique(np.concatenate([pos, neg]))
        return cls(users, pos, neg, bu, bi, np.ones(bu.size, bool), np.ones(bi.size, bool))

    def __len__(self):
        return int(self.users.size)


class NegativeSampler:
    """Uniform negatives by rejection against the user's observed items."""

    def __init__(self, train: InteractionSet):
        self.n_items = train.n_items
        self._keys = train.keys()  # sorted
        self._full = train.user_degrees() >= train.n_items

    def is_positive(self, users, items):
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        idx = np.searchsorted(self._keys, keys)
        idx = np.minimum(idx, self._keys.size - 1)
        return self._keys[idx] == keys

    def sample(self, users, rng):
        """Return (negatives, ok): ``ok`` is False for users who interacted with every item."""
        users = np.asarray(users, dtype=np.int64)
        ok = ~self._full[users]
        if not ok.all():
            warnings.warn(f"{int((~ok).sum())} triple(s) skipped: user interacted with every item",
                          RuntimeWarning, stacklevel=2)
        neg = rng.integers(self.n_items, size=users.size)
        todo = np.flatnonzero(ok & self.is_positive(users, neg))
        while todo.size:
            neg[todo] = rng.integers(self.n_items, size=todo.size)
            todo = todo[self.is_positive(users[todo], neg[todo])]
        return neg, ok


def _make_batch(users, pos, negs: NegativeSampler, rng):
    neg, ok = negs.sample(users, rng)
    return TrainBatch.from_triples(users[ok], pos[ok], neg[ok])


def sample_per_interaction(train: InteractionSet, batch_size, rng, negs=None):
    """One epoch: shuffle all train interactions, cut into batches, add one negative each."""
    if len(train) == 0:
        raise ConfigError("empty training set")
    negs = negs or NegativeSampler(train)
    perm = rng.permutation(len(train))
    for start in range(0, perm.size, batch_size):
        idx = perm[start:start + batch_size]
        yield _make_batch(train.users[idx], train.items[idx], negs, rng)


def sample_per_user(train: InteractionSet, batch_size, samples_per_user, rng, negs=None):
    """``batch_size`` uniform users, each with S positives (with replacement) and S negatives."""
    if samples_per_user < 1:
        raise ConfigError("samples_per_user must be >= 1")
    negs = negs or NegativeSampler(train)
    deg = train.user_degrees()
    off = train.user_offsets()
    active = np.flatnonzero(deg > 0)
    users = active[rng.integers(active.size, size=batch_size)]
    picks = rng.random((batch_size, samples_per_user))
    pos_idx = off[users][:, None] + np.floor(picks * deg[users][:, None]).astype(np.int64)
    pos = train.items[pos_idx].ravel()
    rep_users = np.repeat(users, samples_per_user)
    return _make_batch(rep_users, pos, negs, rng)


def batches_per_epoch(cfg: TrainConfig, train: InteractionSet):
    if cfg.sampler == "per_interaction":
        return math.ceil(len(train) / cfg.batch_size)
    return math.ceil(train.n_users / cfg.batch_size)


def node_dropout(batch: TrainBatch, rate, rng):
    """Keep each batch node for the contrastive loss with probability 1 - rate."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"node dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        batch.cl_kept_users = np.ones(batch.batch_users.size, bool)
        batch.cl_kept_items = np.ones(batch.batch_items.size, bool)
    else:
        batch.cl_kept_users = rng.random(batch.batch_users.size) >= rate
        batch.cl_kept_items = rng.random(batch.batch_items.size) >= rate
    return batch


class Adam:
    """Bias-corrected Adam over a list of arrays; moments kept in float64."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient passed to Adam")
        if self.m is None:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v, "lr": self.lr,
                "betas": (self.beta1, self.beta2), "eps": self.eps}

    def load_state_dict(self, d):
        self.lr, (self.beta1, self.beta2), self.eps = d["lr"], d["betas"], d["eps"]
        self.t, self.m, self.v = d["t"], d["m"], d["v"]


def adam_step(tables, grads, t, lr, m, v, betas=(0.9, 0.999), eps=1e-8):
    """Functional single Adam step at time ``t`` (>= 1); updates tables, m, v in place."""
    if t < 1:
        raise ValueError("t must be >= 1")
    opt = Adam(lr, betas, eps)
    opt.t, opt.m, opt.v = t - 1, m, v
    opt.step(tables, grads)
    return tables


@dataclass
class TrainResult:
    state: EmbeddingState          # best-validation tables (or last epoch without validation)
    train_log: list = field(default_factory=list)
    val_log: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False


def _rngs(seed):
    sample_ss, mask_ss, node_ss = np.random.SeedSequence(seed).spawn(3)
    return {"sample": np.random.default_rng(sample_ss),
            "mask": np.random.default_rng(mask_ss),
            "node": np.random.default_rng(node_ss)}


def full_forward(state, adj, factors=None):
    """Forward pass without edge dropout, as used for evaluation."""
    return forward(state, adj, factors, None)


def train(cfg: TrainConfig, train_set: InteractionSet, adj: SparseBipartite,
          factors: LowRankFactors | None, val_set: InteractionSet | None = None,
          resume: dict | None = None, on_epoch_end=None, on_batch=None) -> TrainResult:
    """Optimize the joint loss; early-stop on validation Recall@20 when ``val_set`` is given.

    ``on_epoch_end(snapshot)`` receives a resumable snapshot dict after every
    epoch; pass one back as ``resume`` to continue. ``on_batch(row)`` sees each
    training log row as it is produced.
    """
    w = cfg.weights
    use_cl = w.lambda1 > 0
    if use_cl and factors is None:
        raise ConfigError("lambda1 > 0 needs SVD factors")
    dtype = np.dtype(cfg.dtype)
    negs = NegativeSampler(train_set)
    has_val = val_set is not None and len(val_set) > 0

    if resume is None:
        state = init_embeddings(train_set.n_users, train_set.n_items, cfg.dim, cfg.seed,
                                cfg.n_layers, dtype)
        opt = Adam(cfg.lr)
        rngs = _rngs(cfg.seed)
        result = TrainResult(state.copy())
        best_metric, bad_epochs, start_epoch = -np.inf, 0, 0
    else:
        state = EmbeddingState(resume["user0"].copy(), resume["item0"].copy(), cfg.n_layers)
        opt = Adam(cfg.lr)
        opt.load_state_dict(resume["adam"])
        rngs = _rngs(cfg.seed)
        for k, st in resume["rng"].items():
            rngs[k].bit_generator.state = st
        best = EmbeddingState(resume["best_user0"].copy(), resume["best_item0"].copy(), cfg.n_layers)
        result = TrainResult(best, list(resume["train_log"]), list(resume["val_log"]),
                             resume["best_epoch"], resume["epoch"])
        best_metric, bad_epochs, start_epoch = resume["best_metric"], resume["bad_epochs"], resume["epoch"]

    keep_prob = 1.0 - cfg.dropout
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        if cfg.sampler == "per_interaction":
            batches = sample_per_interaction(train_set, cfg.batch_size, rngs["sample"], negs)
        else:
            batches = (sample_per_user(train_set, cfg.batch_size, cfg.samples_per_user, rngs["sample"], negs)
                       for _ in range(batches_per_epoch(cfg, train_set)))
        for b_idx, batch in enumerate(batches, start=1):
            mask = EdgeDropoutMask.sample(adj.nnz, keep_prob, rngs["mask"])
            if use_cl:
                node_dropout(batch, cfg.dropout, rngs["node"])
            forward(state, adj, factors if use_cl else None, mask)
            try:
                loss, grads = loss_and_grad(state, factors, batch, w)
                opt.step([state.user0, state.item0], [grads.user, grads.item])
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b_idx}: {exc}") from exc
            row = (epoch, b_idx, loss.ranking, loss.cl_user, loss.cl_item, loss.reg, loss.total)
            result.train_log.append(row)
            if on_batch is not None:
                on_batch(row)
        result.epochs_run = epoch

        if has_val:
            full_forward(state, adj)
            rep = evaluate_embeddings(state.e_user, state.e_item, train_set, val_set, ns=(20,))
            result.val_log.append((epoch, rep.recall[20], rep.ndcg[20]))
            log.info("epoch %d: val recall@20=%.5f ndcg@20=%.5f", epoch, rep.recall[20], rep.ndcg[20])
            if rep.recall[20] > best_metric:
                best_metric, bad_epochs = rep.recall[20], 0
                result.state = state.copy()
                result.best_epoch = epoch
            else:
                bad_epochs += 1
        else:
            result.state = state.copy()
            result.best_epoch = epoch

        stop = has_val and bad_epochs >= cfg.patience
        if on_epoch_end is not None:
            on_epoch_end({
                "config": asdict(cfg), "epoch": epoch,
                "user0": state.user0, "item0": state.item0,
                "best_user0": result.state.user0, "best_item0": result.state.item0,
                "adam": opt.state_dict(),
                "rng": {k: r.bit_generator.state for k, r in rngs.items()},
                "best_metric": best_metric, "bad_epochs": bad_epochs, "best_epoch": result.best_epoch,
                "train_log": result.train_log, "val_log": result.val_log, "finished": stop,
            })
        if stop:
            result.stopped_early = True
            break
    return result
