"""Joint loss: hinge ranking + layer-wise InfoNCE between views + batch L2, with gradients.

Every propagation step is linear, so gradients w.r.t. the layer-0 tables are
accumulated by hand in reverse layer order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .model import EmbeddingState
from .svd import LowRankFactors


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-7
    lambda2: float = 1e-5
    tau: float = 0.5
    cl_skip_layer0: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ranking: float
    cl_user: float
    cl_item: float
    reg: float
    lambda1: float
    lambda2: float
    tau: float

    @classmethod
    def compose(cls, ranking, cl_user, cl_item, reg, w: LossWeights):
        total = ranking + w.lambda1 * (cl_user + cl_item) + w.lambda2 * reg
        return cls(float(total), float(ranking), float(cl_user), float(cl_item), float(reg),
                   w.lambda1, w.lambda2, w.tau)


@dataclass
class GradientSet:
    user: np.ndarray
    item: np.ndarray


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite value in {name}")


def ranking_loss(scores_pos, scores_neg) -> float:
    """Sum of max(0, 1 - pos + neg)."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError(f"length mismatch: {pos.shape} vs {neg.shape}")
    return float(np.maximum(0.0, 1.0 - pos + neg).sum())


# rows this small relative to the largest row are roundoff, not directions
ZERO_NORM_RTOL = 1e-10


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1)
    floor = ZERO_NORM_RTOL * norms.max() if norms.size else 0.0
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > floor)
    return x * inv[:, None], inv


def _infonce_block(a, b, tau, need_grad=True):
    """InfoNCE of anchors ``a`` against candidates ``b`` (row i of b is i's positive).

    Returns (loss, d_loss/d_a, d_loss/d_b). Zero rows have cosine 0 and get
    zero gradient.
    """
    a_hat, inv_a = _unit_rows(a)
    b_hat, inv_b = _unit_rows(b)
    logits = (a_hat @ b_hat.T) / tau
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    denom = ex.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    loss = float(np.sum(lse - np.diag(logits)))
    if not need_grad:
        return loss, None, None
    w = ex / denom
    w[np.diag_indices_from(w)] -= 1.0
    w /= tau
    d_ahat = w @ b_hat
    d_bhat = w.T @ a_hat
    da = (d_ahat - a_hat * np.sum(d_ahat * a_hat, axis=1, keepdims=True)) * inv_a[:, None]
    db = (d_bhat - b_hat * np.sum(d_bhat * b_hat, axis=1, keepdims=True)) * inv_b[:, None]
    return loss, da, db


def infonce(z_layers, g_layers, batch_nodes, kept=None, tau=0.5) -> float:
    """Layer-wise InfoNCE summed over kept batch nodes and the given layers.

    The softmax denominator runs over the kept nodes of the batch only.
    ``kept`` is a boolean mask aligned with ``batch_nodes`` (None keeps all).
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    nodes = np.asarray(batch_nodes, dtype=np.int64)
    if kept is not None:
        nodes = nodes[np.asarray(kept, dtype=bool)]
    if nodes.size == 0:
        return 0.0
    total = 0.0
    for z, g in zip(z_layers, g_layers):
        total += _infonce_block(np.asarray(z, dtype=np.float64)[nodes],
                                np.asarray(g, dtype=np.float64)[nodes], tau, need_grad=False)[0]
    return total


def l2_reg(state: EmbeddingState, users, items) -> float:
    """Squared Frobenius norm of the layer-0 rows touched by the batch."""
    u = state.user0[np.asarray(users, dtype=np.int64)].astype(np.float64)
    v = state.item0[np.asarray(items, dtype=np.int64)].astype(np.float64)
    return float(np.sum(u * u) + np.sum(v * v))


def hinge_violations(state: EmbeddingState, batch) -> np.ndarray:
    """1 - pos + neg per triple, from the final embeddings of the last forward pass."""
    eu, ev = state.e_user, state.e_item
    u = eu[batch.users]
    return 1.0 - np.einsum("ij,ij->i", u, ev[batch.pos]) + np.einsum("ij,ij->i", u, ev[batch.neg])


def loss_and_grad(state: EmbeddingState, factors: LowRankFactors | None, batch, w: LossWeights,
                  need_grad=True):
    """Loss breakdown and gradients w.r.t. ``state.user0``/``state.item0``.

    Requires a forward pass (both views if ``w.lambda1 > 0``) for this batch's
    edge mask. ``batch`` provides users/pos/neg triples, the distinct batch
    users/items, and the node-dropout masks ``cl_kept_users``/``cl_kept_items``.
    """
    if state.e_user is None:
        raise RuntimeError("run the forward pass before loss_and_grad")
    n_layers = state.n_layers
    use_cl = w.lambda1 > 0
    if use_cl and len(state.g_user) != n_layers + 1:
        raise RuntimeError("SVD view missing; run propagate_svd first")

    eu, ev = state.e_user, state.e_item
    viol = hinge_violations(state, batch)
    active = viol > 0
    ranking = float(viol[active].sum())
    _check_finite("ranking loss", viol)

    first = 1 if w.cl_skip_layer0 else 0
    cl = {"user": 0.0, "item": 0.0}
    d_z = {"user": None, "item": None}
    d_g = {"user": None, "item": None}
    if need_grad:
        de_u = np.zeros_like(eu)
        de_v = np.zeros_like(ev)
        ua, pa, na = batch.users[active], batch.pos[active], batch.neg[active]
        np.add.at(de_u, ua, ev[na] - ev[pa])
        np.add.at(de_v, pa, -eu[ua])
        np.add.at(de_v, na, eu[ua])
        d_z["user"] = [de_u.copy() for _ in range(n_layers + 1)]
        d_z["item"] = [de_v.copy() for _ in range(n_layers + 1)]

    if use_cl:
        views = {"user": (state.z_user, state.g_user, batch.batch_users, batch.cl_kept_users),
                 "item": (state.z_item, state.g_item, batch.batch_items, batch.cl_kept_items)}
        for side, (zs, gs, nodes, kept) in views.items():
            nodes = nodes[kept] if kept is not None else nodes
            if need_grad:
                d_g[side] = [None] * (n_layers + 1)
            if nodes.size == 0:
                continue
            for layer in range(first, n_layers + 1):
                loss, da, db = _infonce_block(zs[layer][nodes], gs[layer][nodes], w.tau, need_grad)
                cl[side] += loss
                if need_grad:
                    _check_finite(f"InfoNCE ({side}, layer {layer})", da, db)
                    d_z[side][layer][nodes] += w.lambda1 * da
                    dg = np.zeros_like(gs[layer])
                    dg[nodes] = w.lambda1 * db
                    d_g[side][layer] = dg

    reg = l2_reg(state, batch.batch_users, batch.batch_items)
    breakdown = LossBreakdown.compose(ranking, cl["user"], cl["item"], reg, w)
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite total loss")
    if not need_grad:
        return breakdown, None

    p, pt = state.operators
    dzu, dzv = d_z["user"], d_z["item"]
    dgu, dgv = d_g["user"], d_g["item"]
    for layer in range(n_layers, 0, -1):
        # z_u[l] = P z_v[l-1];  z_v[l] = P^T z_u[l-1]
        dzv[layer - 1] += pt @ dzu[layer]
        dzu[layer - 1] += p @ dzv[layer]
        # g_u[l] = US V^T z_v[l-1];  g_v[l] = VS U^T z_u[l-1]
        if dgu is not None and dgu[layer] is not None:
            dzv[layer - 1] += factors.v @ (factors.us.T @ dgu[layer])
        if dgv is not None and dgv[layer] is not None:
            dzu[layer - 1] += factors.u @ (factors.vs.T @ dgv[layer])

    grad_u, grad_v = dzu[0], dzv[0]
    # layer 0 of the SVD view aliases the tables
    if dgu is not None and dgu[0] is not None:
        grad_u = grad_u + dgu[0]
    if dgv is not None and dgv[0] is not None:
        grad_v = grad_v + dgv[0]
    if w.lambda2 > 0:
        bu, bi = batch.batch_users, batch.batch_items
        grad_u[bu] += 2.0 * w.lambda2 * state.user0[bu].astype(np.float64)
        grad_v[bi] += 2.0 * w.lambda2 * state.item0[bi].astype(np.float64)
    _check_finite("gradient", grad_u, grad_v)
    return breakdown, GradientSet(grad_u, grad_v)


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    tolerance: float
    worst: tuple | None = None

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_err < self.tolerance


def finite_diff_check(state: EmbeddingState, loss_fn, grad: GradientSet, tolerance=1e-4,
                      n_coords=200, eps=1e-3, seed=0, abs_floor=1e-6, pattern_fn=None):
    """Compare ``grad`` with central differences of ``loss_fn(state)`` on sampled coordinates.

    Tables must be float64; they are perturbed in place and restored. The
    relative error of a coordinate is |a - n| / max(|a|, |n|, abs_floor).
    If ``pattern_fn(state)`` is given, coordinates whose +/- perturbations
    change the returned pattern (e.g. hinge activity) straddle a kink and are
    skipped.
    """
    if state.user0.dtype != np.float64 or state.item0.dtype != np.float64:
        raise ValueError("finite differences require float64 tables")
    tables = [(state.user0, grad.user), (state.item0, grad.item)]
    coords = [(t, r, c) for t, (tab, _) in enumerate(tables)
              for r in range(tab.shape[0]) for c in range(tab.shape[1])]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        coords = [coords[k] for k in np.sort(rng.choice(len(coords), n_coords, replace=False))]
    worst, max_err, skipped, checked = None, 0.0, 0, 0
    for t, r, c in coords:
        tab, g = tables[t]
        orig = tab[r, c]
        tab[r, c] = orig + eps
        f_plus = loss_fn(state)
        pat_plus = pattern_fn(state) if pattern_fn else None
        tab[r, c] = orig - eps
        f_minus = loss_fn(state)
        pat_minus = pattern_fn(state) if pattern_fn else None
        tab[r, c] = orig
        if pattern_fn is not None and not np.array_equal(pat_plus, pat_minus):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = g[r, c]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        checked += 1
        if worst is None or err > max_err:
            max_err = err
            worst = (("user", "item")[t], r, c, analytic, numeric)
    return FiniteDiffReport(max_err, checked, skipped, tolerance, worst)
