"""Interaction ingestion, splitting, and the normalized bipartite adjacency."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, EmptyInputError, ParseError

SEPARATORS = {"tsv": "\t", "csv": ","}


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Deduplicated (user, item) pairs over dense id ranges.

    ``users`` and ``items`` are parallel int64 arrays sorted by (user, item).
    ``user_raw``/``item_raw`` map dense ids back to the ids found in the
    source file, when the set came from ``load_interactions``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    user_raw: np.ndarray | None = field(default=None, compare=False)
    item_raw: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def from_pairs(cls, n_users, n_items, users, items, user_raw=None, item_raw=None):
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise ValueError("users and items must have equal length")
        if users.size:
            if users.min() < 0 or users.max() >= n_users:
                raise ValueError("user id out of range")
            if items.min() < 0 or items.max() >= n_items:
                raise ValueError("item id out of range")
        keys = np.unique(users * n_items + items)
        return cls(int(n_users), int(n_items), keys // n_items, keys % n_items, user_raw, item_raw)

    def __len__(self):
        return int(self.users.size)

    def __eq__(self, other):
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return ((self.n_users, self.n_items) == (other.n_users, other.n_items)
                and np.array_equal(self.users, other.users) and np.array_equal(self.items, other.items))

    __hash__ = None

    @property
    def pairs(self):
        return np.stack([self.users, self.items], axis=1)

    def user_degrees(self):
        return np.bincount(self.users, minlength=self.n_users)

    def item_degrees(self):
        return np.bincount(self.items, minlength=self.n_items)

    def user_offsets(self):
        """CSR-style row offsets into ``items`` (pairs are sorted by user)."""
        return np.concatenate([[0], np.cumsum(self.user_degrees())]).astype(np.int64)

    def items_of(self, user):
        off = self.user_offsets()
        return self.items[off[user]:off[user + 1]]

    def keys(self):
        """Sorted scalar keys ``user * n_items + item``; handy for membership tests."""
        return self.users * self.n_items + self.items

    def with_pairs(self, users, items):
        return InteractionSet.from_pairs(self.n_users, self.n_items, users, items,
                                         self.user_raw, self.item_raw)

    def union(self, other):
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            raise ValueError("shape mismatch")
        return self.with_pairs(np.concatenate([self.users, other.users]),
                               np.concatenate([self.items, other.items]))

    def to_csr(self):
        data = np.ones(len(self), dtype=np.float64)
        return sp.csr_matrix((data, (self.users, self.items)), shape=(self.n_users, self.n_items))


def _parse_file(path, sep):
    users, items = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(sep)
            if len(fields) < 2:
                raise ParseError(path, lineno, f"expected at least 2 fields, got {len(fields)}")
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer id in {line!r}") from None
            if u < 0 or i < 0:
                raise ParseError(path, lineno, "negative id")
            users.append(u)
            items.append(i)
    if not users:
        raise EmptyInputError(f"{path}: no interactions")
    return np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)


def load_interactions(path, format="tsv"):
    """Read ``user<sep>item[<sep>...]`` lines and re-index ids densely.

    Extra fields (ratings, timestamps) are ignored. Dense ids follow the
    ascending order of the raw ids.
    """
    if format not in SEPARATORS:
        raise ConfigError(f"unknown format {format!r}; expected one of {sorted(SEPARATORS)}")
    raw_u, raw_i = _parse_file(path, SEPARATORS[format])
    user_raw, users = np.unique(raw_u, return_inverse=True)
    item_raw, items = np.unique(raw_i, return_inverse=True)
    return InteractionSet.from_pairs(user_raw.size, item_raw.size, users, items, user_raw, item_raw)


def read_dense(path, n_users, n_items):
    """Read a split file written by ``write_interactions`` (ids already dense)."""
    users, items = _parse_file(path, "\t")
    try:
        return InteractionSet.from_pairs(n_users, n_items, users, items)
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None


def write_interactions(s: InteractionSet, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(s.users.tolist(), s.items.tolist()):
            fh.write(f"{u}\t{i}\n")


def write_idmap(s: InteractionSet, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind\traw\tdense\n")
        for kind, raw in (("user", s.user_raw), ("item", s.item_raw)):
            if raw is None:
                raw = np.arange(s.n_users if kind == "user" else s.n_items)
            for dense, r in enumerate(raw.tolist()):
                fh.write(f"{kind}\t{r}\t{dense}\n")


def read_idmap(path):
    """Return (user_raw, item_raw) arrays indexed by dense id."""
    maps = {"user": {}, "item": {}}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("kind"):
            raise ParseError(path, 1, "missing idmap header")
        for lineno, line in enumerate(fh, start=2):
            kind, raw, dense = line.rstrip("\n").split("\t")
            maps[kind][int(dense)] = int(raw)
    out = []
    for kind in ("user", "item"):
        m = maps[kind]
        out.append(np.array([m[k] for k in range(len(m))], dtype=np.int64))
    return tuple(out)


def _holdout_count(deg, ratio):
    # round() guards against 0.1 * 30 = 3.0000000000000004
    n = math.ceil(round(ratio * deg, 9))
    return min(n, deg - 1)


def split(s: InteractionSet, test_ratio, seed):
    """Per-user random holdout; every user keeps at least one train pair."""
    if not 0.0 < test_ratio < 1.0:
        raise ConfigError(f"test_ratio must lie in (0, 1), got {test_ratio}")
    rng = np.random.default_rng(seed)
    off = s.user_offsets()
    is_test = np.zeros(len(s), dtype=bool)
    for u in range(s.n_users):
        lo, hi = off[u], off[u + 1]
        deg = hi - lo
        if deg == 0:
            continue
        k = _holdout_count(int(deg), test_ratio)
        if k > 0:
            is_test[lo + rng.permutation(deg)[:k]] = True
    train = s.with_pairs(s.users[~is_test], s.items[~is_test])
    test = s.with_pairs(s.users[is_test], s.items[is_test])
    return train, test


@dataclass(frozen=True)
class SparseBipartite:
    """Immutable I x J sparse matrix with row- and column-compressed mirrors.

    ``mirror_perm[k]`` is the position in the row-compressed value array of
    the k-th stored entry of the column-compressed mirror, so a per-edge mask
    can be applied to both at once.
    """

    csr: sp.csr_matrix
    csr_t: sp.csr_matrix
    mirror_perm: np.ndarray

    @classmethod
    def from_csr(cls, m):
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        pos = sp.csr_matrix((np.arange(m.nnz, dtype=np.float64), m.indices, m.indptr), shape=m.shape)
        pos_t = pos.T.tocsr()
        pos_t.sort_indices()
        perm = pos_t.data.astype(np.int64)
        mt = sp.csr_matrix((m.data[perm], pos_t.indices, pos_t.indptr), shape=pos_t.shape)
        return cls(m, mt, perm)

    @property
    def shape(self):
        return self.csr.shape

    @property
    def nnz(self):
        return int(self.csr.nnz)

    @property
    def row_offsets(self):
        return self.csr.indptr

    @property
    def col_indices(self):
        return self.csr.indices

    @property
    def values(self):
        return self.csr.data

    @property
    def col_offsets(self):
        return self.csr_t.indptr

    @property
    def row_indices(self):
        return self.csr_t.indices

    def coo(self):
        """(rows, cols, values) in row-major order."""
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.csr.indptr))
        return rows, self.csr.indices.astype(np.int64), self.csr.data

    def to_dense(self):
        return self.csr.toarray()

    def masked(self, kept, scale):
        """Return (P, P^T) with dropped edges zeroed and kept ones multiplied by ``scale``."""
        data = np.where(kept, self.csr.data * scale, 0.0)
        p = sp.csr_matrix((data, self.csr.indices, self.csr.indptr), shape=self.shape)
        pt = sp.csr_matrix((data[self.mirror_perm], self.csr_t.indices, self.csr_t.indptr),
                           shape=self.csr_t.shape)
        return p, pt


def normalize(train: InteractionSet) -> SparseBipartite:
    """Symmetric degree normalization D_u^-1/2 A D_v^-1/2 over train pairs."""
    if len(train) == 0:
        raise EmptyInputError("cannot normalize an empty interaction set")
    du = train.user_degrees().astype(np.float64)
    dv = train.item_degrees().astype(np.float64)
    vals = 1.0 / np.sqrt(du[train.users] * dv[train.items])
    m = sp.csr_matrix((vals, (train.users, train.items)), shape=(train.n_users, train.n_items))
    return SparseBipartite.from_csr(m)


_ADJ_MAGIC = b"LGCLADJ\0"


def save_adjacency(a: SparseBipartite, path):
    with open(path, "wb") as fh:
        fh.write(_ADJ_MAGIC)
        np.array([1, a.shape[0], a.shape[1], a.nnz], dtype="<u8").tofile(fh)
        a.csr.indptr.astype("<i8").tofile(fh)
        a.csr.indices.astype("<i8").tofile(fh)
        a.csr.data.astype("<f8").tofile(fh)


def load_adjacency(path) -> SparseBipartite:
    from .errors import DataError

    with open(path, "rb") as fh:
        if fh.read(8) != _ADJ_MAGIC:
            raise DataError(f"{path}: not an adjacency cache")
        _, n_rows, n_cols, nnz = np.fromfile(fh, dtype="<u8", count=4).astype(np.int64)
        indptr = np.fromfile(fh, dtype="<i8", count=n_rows + 1)
        indices = np.fromfile(fh, dtype="<i8", count=nnz)
        data = np.fromfile(fh, dtype="<f8", count=nnz)
    if data.size != nnz:
        raise DataError(f"{path}: truncated adjacency cache")
    return SparseBipartite.from_csr(sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols)))


@dataclass(frozen=True)
class DegreeGrouping:
    boundaries: tuple
    user_group: np.ndarray
    item_group: np.ndarray

    @property
    def n_groups(self):
        return len(self.boundaries) + 1


def assign_groups(degrees, boundaries):
    """Half-open bins [0, b0), [b0, b1), ..., [b_last, inf)."""
    b = np.asarray(boundaries, dtype=np.float64)
    if b.size > 1 and np.any(np.diff(b) <= 0):
        raise ConfigError(f"group boundaries must be strictly ascending: {list(boundaries)}")
    return np.searchsorted(b, np.asarray(degrees), side="right").astype(np.int64)


def group_by_degree(s: InteractionSet, boundaries) -> DegreeGrouping:
    boundaries = tuple(boundaries)
    return DegreeGrouping(boundaries,
                          assign_groups(s.user_degrees(), boundaries),
                          assign_groups(s.item_degrees(), boundaries))


def synthetic_block_graph(n_users, n_items, n_blocks=8, mean_degree=40, in_block=0.8,
                          popularity_exponent=0.8, seed=0) -> InteractionSet:
    """Community-structured implicit feedback with long-tailed item popularity.

    Each user belongs to one block and draws ``in_block`` of its interactions
    from that block's items, the rest from the whole catalogue. Item draws are
    weighted by a Zipf-like popularity so degrees are skewed.
    """
    rng = np.random.default_rng(seed)
    user_block = rng.integers(n_blocks, size=n_users)
    item_block = rng.integers(n_blocks, size=n_items)
    pop = (1.0 + rng.permutation(n_items)) ** -popularity_exponent
    block_items = [np.flatnonzero(item_block == b) for b in range(n_blocks)]
    block_p = [pop[ix] / pop[ix].sum() for ix in block_items]
    all_p = pop / pop.sum()
    degrees = np.maximum(2, rng.poisson(mean_degree, size=n_users))
    users, items = [], []
    for u in range(n_users):
        deg = min(int(degrees[u]), n_items // 2)
        k_in = rng.binomial(deg, in_block)
        b = user_block[u]
        k_in = min(k_in, block_items[b].size)
        chosen = set()
        if k_in > 0:
            chosen.update(rng.choice(block_items[b], size=k_in, replace=False, p=block_p[b]).tolist())
        while len(chosen) < deg:
            chosen.update(rng.choice(n_items, size=deg - len(chosen), p=all_p).tolist())
        users.extend([u] * len(chosen))
        items.extend(sorted(chosen))
    s = InteractionSet.from_pairs(n_users, n_items, users, items)
    # drop items nobody touched so every id is live
    live = np.flatnonzero(s.item_degrees() > 0)
    remap = np.full(n_items, -1, dtype=np.int64)
    remap[live] = np.arange(live.size)
    return InteractionSet.from_pairs(n_users, live.size, s.users, remap[s.items])
