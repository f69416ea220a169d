"""Randomized truncated SVD of the normalized adjacency and its low-rank factors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

MAX_ORACLE_DIM = 512
MAX_DENSE_ENTRIES = 1 << 22


@dataclass(frozen=True)
class RsvdConfig:
    q: int = 5
    oversample: int | None = None  # None means "same as q"
    power_iters: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if self.oversample is not None and self.oversample < 0:
            raise ConfigError(f"oversample must be >= 0, got {self.oversample}")
        if self.power_iters < 0:
            raise ConfigError(f"power_iters must be >= 0, got {self.power_iters}")

    @property
    def sketch_width(self):
        return self.q + (self.q if self.oversample is None else self.oversample)


@dataclass(frozen=True)
class LowRankFactors:
    """Rank-q factors ``U diag(S) V^T`` plus the products ``U*S`` and ``V*S``."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    us: np.ndarray
    vs: np.ndarray

    @classmethod
    def from_usv(cls, u, s, v):
        u = np.ascontiguousarray(u, dtype=np.float64)
        s = np.ascontiguousarray(s, dtype=np.float64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        if u.shape[1] != s.size or v.shape[1] != s.size:
            raise ValueError("factor ranks disagree")
        for a in (u, s, v):
            a.setflags(write=False)
        us, vs = u * s, v * s
        us.setflags(write=False)
        vs.setflags(write=False)
        return cls(u, s, v, us, vs)

    @property
    def q(self):
        return int(self.s.size)

    @property
    def shape(self):
        return self.u.shape[0], self.v.shape[0]


def _orth(y):
    q, _ = np.linalg.qr(y)
    return q


def approx_svd(a, cfg: RsvdConfig) -> LowRankFactors:
    """Randomized range finder with power iterations, then an exact SVD of the sketch.

    ``a`` may be a ``SparseBipartite``, a scipy sparse matrix, or a dense array.
    """
    m = getattr(a, "csr", a)
    n_rows, n_cols = m.shape
    if n_rows == 0 or n_cols == 0 or (hasattr(m, "nnz") and m.nnz == 0):
        raise DataError("approx_svd needs a nonempty matrix")
    if cfg.q > min(n_rows, n_cols):
        raise ConfigError(f"q={cfg.q} exceeds min(I, J)={min(n_rows, n_cols)}")
    mt = getattr(a, "csr_t", None)
    if mt is None:
        mt = m.T
    k = min(cfg.sketch_width, n_rows, n_cols)

    rng = np.random.default_rng(cfg.seed)
    omega = rng.standard_normal((n_cols, k))
    q = _orth(m @ omega)
    for _ in range(cfg.power_iters):
        z = _orth(np.asarray(mt @ q))
        q = _orth(np.asarray(m @ z))

    b = np.asarray((mt @ q).T)  # Q^T A, shape k x J
    ub, sb, vbt = np.linalg.svd(b, full_matrices=False)
    # sketch columns that collapsed onto each other show up as ~0 singular values
    q_eff = cfg.q
    tol = sb[0] * max(n_rows, n_cols) * np.finfo(np.float64).eps if sb.size else 0.0
    n_indep = int(np.count_nonzero(sb > tol))
    if n_indep < cfg.q:
        warnings.warn(f"sketch spans only {n_indep} independent directions; "
                      f"reducing rank from {cfg.q} to {max(n_indep, 1)}", RuntimeWarning, stacklevel=2)
        q_eff = max(n_indep, 1)
    u = q @ ub[:, :q_eff]
    return LowRankFactors.from_usv(u, sb[:q_eff], vbt[:q_eff].T)


def _round_robin(n):
    """Yield rounds of disjoint index pairs covering every pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        left = np.array(players[: m // 2])
        right = np.array(players[m // 2:][::-1])
        keep = (left >= 0) & (right >= 0)
        yield left[keep], right[keep]
        players = [players[0]] + [players[-1]] + players[1:-1]


def exact_svd(a, tol=1e-15, max_sweeps=80):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Independent of LAPACK's SVD; used as a test oracle only. Returns
    ``(U, S, V)`` with ``A = U diag(S) V^T``, ``S`` descending.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2:
        raise ValueError("exact_svd expects a 2-D array")
    if min(a.shape) > MAX_ORACLE_DIM:
        raise ConfigError(f"exact_svd is a test oracle; min dimension {min(a.shape)} > {MAX_ORACLE_DIM}")
    transposed = a.shape[0] < a.shape[1]
    g = a.T.copy() if transposed else a
    n = g.shape[1]
    v = np.eye(n)
    if n > 1:
        for _ in range(max_sweeps):
            rotated = False
            for i, j in _round_robin(n):
                gi, gj = g[:, i], g[:, j]
                alpha = np.einsum("ij,ij->j", gi, gi)
                beta = np.einsum("ij,ij->j", gj, gj)
                gamma = np.einsum("ij,ij->j", gi, gj)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                i, j = i[active], j[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for mat in (g, v):
                    x, y = mat[:, i].copy(), mat[:, j]
                    mat[:, i] = c * x - s * y
                    mat[:, j] = s * x + c * y
            if not rotated:
                break
    sv = np.linalg.norm(g, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, g, v = sv[order], g[:, order], v[:, order]
    u = np.zeros_like(g)
    nz = sv > sv[0] * 1e-300 if sv.size and sv[0] > 0 else np.zeros(sv.size, dtype=bool)
    u[:, nz] = g[:, nz] / sv[nz]
    u = _complete_orthonormal(u, nz)
    if transposed:
        return v, sv, u
    return u, sv, v


def _complete_orthonormal(u, filled):
    """Fill the unfilled columns of ``u`` with an orthonormal completion."""
    m = u.shape[0]
    for col in np.flatnonzero(~filled):
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                cand -= u @ (u.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > 1e-8:
                u[:, col] = cand / nrm
                break
    return u


def dense_reconstruct(f: LowRankFactors):
    """Materialize ``U diag(S) V^T``; validation only, guarded by size."""
    n_rows, n_cols = f.shape
    if n_rows * n_cols > MAX_DENSE_ENTRIES:
        raise ConfigError(f"refusing to materialize a {n_rows}x{n_cols} dense matrix")
    return f.us @ f.v.T


_FACTOR_MAGIC = b"LGCLSVD\0"
_FACTOR_VERSION = 1


def save_factors(f: LowRankFactors, path):
    """Header (magic, version, I, J, q as little-endian u64), then U, S, V as row-major f64."""
    n_rows, n_cols = f.shape
    with open(path, "wb") as fh:
        fh.write(_FACTOR_MAGIC)
        np.array([_FACTOR_VERSION, n_rows, n_cols, f.q], dtype="<u8").tofile(fh)
        for arr in (f.u, f.s, f.v):
            np.ascontiguousarray(arr, dtype="<f8").tofile(fh)


def load_factors(path) -> LowRankFactors:
    with open(path, "rb") as fh:
        if fh.read(8) != _FACTOR_MAGIC:
            raise DataError(f"{path}: not a factor file")
        version, n_rows, n_cols, q = (int(x) for x in np.fromfile(fh, dtype="<u8", count=4))
        if version != _FACTOR_VERSION:
            raise DataError(f"{path}: unsupported factor file version {version}")
        u = np.fromfile(fh, dtype="<f8", count=n_rows * q)
        s = np.fromfile(fh, dtype="<f8", count=q)
        v = np.fromfile(fh, dtype="<f8", count=n_cols * q)
    if u.size != n_rows * q or s.size != q or v.size != n_cols * q:
        raise DataError(f"{path}: truncated factor file")
    return LowRankFactors.from_usv(u.reshape(n_rows, q), s, v.reshape(n_cols, q))
