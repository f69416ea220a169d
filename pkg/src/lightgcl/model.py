"""Embedding tables and the two propagation views (sparse graph and low-rank SVD)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SparseBipartite
from .errors import DataError
from .svd import LowRankFactors


@dataclass
class EdgeDropoutMask:
    keep_prob: float
    kept: np.ndarray  # bool over the stored entries of the adjacency, row-major order

    @classmethod
    def full(cls, nnz):
        return cls(1.0, np.ones(nnz, dtype=bool))

    @classmethod
    def sample(cls, nnz, keep_prob, rng):
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        if keep_prob == 1.0:
            return cls.full(nnz)
        return cls(float(keep_prob), rng.random(nnz) < keep_prob)


@dataclass
class EmbeddingState:
    """Layer-0 tables plus the per-layer outputs of the last forward pass.

    Propagated arrays are float64 regardless of the table dtype.
    """

    user0: np.ndarray
    item0: np.ndarray
    n_layers: int = 2
    z_user: list = field(default_factory=list)
    z_item: list = field(default_factory=list)
    g_user: list = field(default_factory=list)
    g_item: list = field(default_factory=list)
    e_user: np.ndarray | None = None
    e_item: np.ndarray | None = None
    # (P, P^T) used by the last local propagation; needed for backprop
    operators: tuple | None = None

    @property
    def n_users(self):
        return self.user0.shape[0]

    @property
    def n_items(self):
        return self.item0.shape[0]

    @property
    def dim(self):
        return self.user0.shape[1]

    def copy(self):
        return EmbeddingState(self.user0.copy(), self.item0.copy(), self.n_layers)


def init_embeddings(n_users, n_items, dim, seed, n_layers=2, dtype=np.float32) -> EmbeddingState:
    """Xavier-uniform tables in [-sqrt(6/(2d)), sqrt(6/(2d))]."""
    if dim < 1:
        raise ValueError(f"embedding size must be >= 1, got {dim}")
    bound = np.sqrt(6.0 / (2 * dim))
    rng = np.random.default_rng(seed)
    user0 = rng.uniform(-bound, bound, size=(n_users, dim)).astype(dtype)
    item0 = rng.uniform(-bound, bound, size=(n_items, dim)).astype(dtype)
    return EmbeddingState(user0, item0, n_layers)


def propagate_local(state: EmbeddingState, adj: SparseBipartite, mask: EdgeDropoutMask | None = None):
    """Main view: z_u[l] = P z_v[l-1], z_v[l] = P^T z_u[l-1]; e = sum over layers.

    ``P`` is the adjacency with dropped edges zeroed and kept edges divided by
    the keep probability.
    """
    if adj.shape != (state.n_users, state.n_items):
        raise DataError(f"adjacency shape {adj.shape} does not match tables "
                        f"({state.n_users}, {state.n_items})")
    if mask is None or mask.keep_prob == 1.0 and mask.kept.all():
        p, pt = adj.csr, adj.csr_t
    else:
        if mask.kept.size != adj.nnz:
            raise DataError("edge mask length does not match adjacency nnz")
        p, pt = adj.masked(mask.kept, 1.0 / mask.keep_prob)
    zu = [state.user0.astype(np.float64)]
    zv = [state.item0.astype(np.float64)]
    for _ in range(state.n_layers):
        zu_next = p @ zv[-1]
        zv_next = pt @ zu[-1]
        zu.append(zu_next)
        zv.append(zv_next)
    state.z_user, state.z_item = zu, zv
    state.e_user = np.sum(zu, axis=0)
    state.e_item = np.sum(zv, axis=0)
    state.operators = (p, pt)
    return state


def propagate_svd(state: EmbeddingState, f: LowRankFactors):
    """SVD view: g_u[l] = (U S)(V^T z_v[l-1]), g_v[l] = (V S)(U^T z_u[l-1]).

    Reads the main-view previous layer, so ``propagate_local`` must run first.
    Never forms the dense I x J reconstruction.
    """
    if f.shape != (state.n_users, state.n_items):
        raise DataError(f"factor shape {f.shape} does not match tables ({state.n_users}, {state.n_items})")
    if len(state.z_user) != state.n_layers + 1:
        raise RuntimeError("propagate_local must run before propagate_svd")
    gu = [state.z_user[0]]
    gv = [state.z_item[0]]
    for layer in range(1, state.n_layers + 1):
        gu.append(f.us @ (f.v.T @ state.z_item[layer - 1]))
        gv.append(f.vs @ (f.u.T @ state.z_user[layer - 1]))
    state.g_user, state.g_item = gu, gv
    return state


def forward(state, adj, factors=None, mask=None):
    propagate_local(state, adj, mask)
    if factors is not None:
        propagate_svd(state, factors)
    return state


def _final(state):
    if state.e_user is None:
        raise RuntimeError("no forward pass has been run")
    return state.e_user, state.e_item


def score(state: EmbeddingState, user, item) -> float:
    eu, ev = _final(state)
    if not (0 <= user < eu.shape[0]) or not (0 <= item < ev.shape[0]):
        raise IndexError(f"(user={user}, item={item}) out of range {eu.shape[0]}x{ev.shape[0]}")
    return float(eu[user] @ ev[item])


def score_all(state: EmbeddingState, user) -> np.ndarray:
    eu, ev = _final(state)
    if not 0 <= user < eu.shape[0]:
        raise IndexError(f"user {user} out of range {eu.shape[0]}")
    return ev @ eu[user]


_CKPT_MAGIC = b"LGCLCKPT"
_CKPT_VERSION = 1


def save_checkpoint(state: EmbeddingState, path):
    """Header (magic, version, I, J, d, L as little-endian u64), then f32 user and item tables."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        np.array([_CKPT_VERSION, state.n_users, state.n_items, state.dim, state.n_layers],
                 dtype="<u8").tofile(fh)
        np.ascontiguousarray(state.user0, dtype="<f4").tofile(fh)
        np.ascontiguousarray(state.item0, dtype="<f4").tofile(fh)


def load_checkpoint(path) -> EmbeddingState:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, n_users, n_items, dim, n_layers = (int(x) for x in np.fromfile(fh, dtype="<u8", count=5))
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        user0 = np.fromfile(fh, dtype="<f4", count=n_users * dim)
        item0 = np.fromfile(fh, dtype="<f4", count=n_items * dim)
    if user0.size != n_users * dim or item0.size != n_items * dim:
        raise DataError(f"{path}: truncated checkpoint")
    return EmbeddingState(user0.reshape(n_users, dim).astype(np.float32),
                          item0.reshape(n_items, dim).astype(np.float32), n_layers)
