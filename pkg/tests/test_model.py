import numpy as np
import pytest
from hypothesis import given, strategies as st

from lightgcl.data import InteractionSet, normalize
from lightgcl.errors import DataError
from lightgcl.model import (
    EdgeDropoutMask, EmbeddingState, forward, init_embeddings, load_checkpoint, propagate_local,
    propagate_svd, save_checkpoint, score, score_all,
)
from lightgcl.svd import LowRankFactors, RsvdConfig, approx_svd, dense_reconstruct, exact_svd

from instances import random_interactions


def _state(user0, item0, n_layers=2):
    return EmbeddingState(np.asarray(user0, dtype=np.float64), np.asarray(item0, dtype=np.float64), n_layers)


# --- initialization -----------------------------------------------------------

def test_init_bound_d32():
    s = init_embeddings(40, 50, 32, seed=0)
    bound = np.sqrt(6 / 64)
    assert abs(bound - 0.306) < 1e-3
    assert np.abs(s.user0).max() <= bound and np.abs(s.item0).max() <= bound
    assert s.user0.dtype == np.float32


def test_init_seeded():
    a, b, c = (init_embeddings(5, 6, 4, seed=k) for k in (1, 1, 2))
    np.testing.assert_array_equal(a.user0, b.user0)
    assert not np.array_equal(a.user0, c.user0)


def test_init_rejects_zero_dim():
    with pytest.raises(ValueError):
        init_embeddings(2, 2, 0, seed=0)


# --- main view ------------------------------------------------------------------

def test_zero_tables_give_zero(toy_adj):
    s = forward(_state(np.zeros((2, 3)), np.zeros((2, 3))), toy_adj)
    assert all(not z.any() for z in s.z_user + s.z_item)
    assert not s.e_user.any() and not s.e_item.any()


def test_single_edge_layer_one():
    adj = normalize(InteractionSet.from_pairs(1, 1, [0], [0]))
    v = np.array([[0.3, -1.2, 2.0]])
    s = propagate_local(_state(np.zeros((1, 3)), v), adj, EdgeDropoutMask.full(1))
    np.testing.assert_array_equal(s.z_user[1], v)


def test_layer_zero_aliases_tables_and_sum(toy_adj, rng):
    s = forward(_state(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), 3), toy_adj)
    np.testing.assert_array_equal(s.z_user[0], s.user0)
    np.testing.assert_allclose(s.e_user, sum(s.z_user), rtol=1e-15)
    np.testing.assert_allclose(s.e_item, sum(s.z_item), rtol=1e-15)
    assert len(s.z_user) == 4


def test_local_matches_dense(rng):
    adj = normalize(random_interactions(rng, 7, 9))
    a = adj.to_dense()
    s = forward(_state(rng.standard_normal((7, 3)), rng.standard_normal((9, 3))), adj)
    np.testing.assert_allclose(s.z_user[1], a @ s.item0, rtol=1e-12)
    np.testing.assert_allclose(s.z_item[2], a.T @ (a @ s.item0), rtol=1e-12)


def test_dimension_mismatch(toy_adj):
    with pytest.raises(DataError):
        propagate_local(_state(np.zeros((3, 2)), np.zeros((2, 2))), toy_adj)
    with pytest.raises(DataError):
        propagate_local(_state(np.zeros((2, 2)), np.zeros((2, 2))), toy_adj, EdgeDropoutMask(0.5, np.ones(5, bool)))


@given(st.integers(0, 2**32 - 1), st.floats(-5, 5, allow_nan=False, allow_subnormal=False))
def test_both_views_linear(seed, c):
    rng = np.random.default_rng(seed)
    adj = normalize(random_interactions(rng, 5, 6))
    f = approx_svd(adj, RsvdConfig(q=3, seed=seed))
    mask = EdgeDropoutMask.sample(adj.nnz, 0.7, np.random.default_rng(seed))
    u0, v0 = rng.standard_normal((5, 3)), rng.standard_normal((6, 3))
    a = forward(_state(u0, v0), adj, f, mask)
    b = forward(_state(c * u0, c * v0), adj, f, mask)
    for x, y in zip(a.z_user + a.g_item + [a.e_user], b.z_user + b.g_item + [b.e_user]):
        np.testing.assert_allclose(y, c * x, rtol=1e-12, atol=1e-12)


def test_edge_dropout_unbiased():
    # ten edges; mean of the masked operator over 10,000 masks recovers the adjacency
    s = InteractionSet.from_pairs(4, 4, [0, 0, 0, 1, 1, 2, 2, 3, 3, 3], [0, 1, 2, 1, 3, 0, 2, 1, 2, 3])
    adj = normalize(s)
    assert adj.nnz == 10
    rng = np.random.default_rng(0)
    total = np.zeros(adj.nnz)
    for _ in range(10_000):
        m = EdgeDropoutMask.sample(adj.nnz, 0.75, rng)
        total += adj.masked(m.kept, 1 / m.keep_prob)[0].data
    np.testing.assert_allclose(total / 10_000, adj.values, rtol=0.02)


def test_mask_keep_fraction():
    m = EdgeDropoutMask.sample(100_000, 0.75, np.random.default_rng(1))
    assert abs(m.kept.mean() - 0.75) < 0.01
    with pytest.raises(ValueError):
        EdgeDropoutMask.sample(3, 0.0, np.random.default_rng(1))


# --- SVD view ---------------------------------------------------------------------

def test_svd_view_requires_main_view(toy_adj):
    f = approx_svd(toy_adj, RsvdConfig(q=1))
    with pytest.raises(RuntimeError):
        propagate_svd(_state(np.zeros((2, 2)), np.zeros((2, 2))), f)


def test_svd_view_shape_mismatch(toy_adj):
    f = LowRankFactors.from_usv(np.ones((3, 1)), [1.0], np.ones((2, 1)))
    s = propagate_local(_state(np.zeros((2, 2)), np.zeros((2, 2))), toy_adj)
    with pytest.raises(DataError):
        propagate_svd(s, f)


def test_svd_view_zero_input(toy_adj):
    f = approx_svd(toy_adj, RsvdConfig(q=2))
    s = forward(_state(np.zeros((2, 3)), np.zeros((2, 3))), toy_adj, f)
    assert all(not g.any() for g in s.g_user + s.g_item)


def test_svd_view_layer_zero_and_dense(rng):
    adj = normalize(random_interactions(rng, 8, 6))
    f = approx_svd(adj, RsvdConfig(q=3))
    s = forward(_state(rng.standard_normal((8, 4)), rng.standard_normal((6, 4))), adj, f)
    dense = dense_reconstruct(f)
    np.testing.assert_array_equal(s.g_user[0], s.z_user[0])
    for l in (1, 2):
        np.testing.assert_allclose(s.g_user[l], dense @ s.z_item[l - 1], rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(s.g_item[l], dense.T @ s.z_user[l - 1], rtol=1e-10, atol=1e-14)


def test_rank_one_view_is_collinear(rng):
    adj = normalize(random_interactions(rng, 6, 5))
    f = approx_svd(adj, RsvdConfig(q=1))
    s = forward(_state(rng.standard_normal((6, 3)), rng.standard_normal((5, 3))), adj, f)
    assert np.linalg.matrix_rank(s.g_user[1], tol=1e-10) == 1


def test_full_rank_exact_svd_reproduces_main_view(rng):
    adj = normalize(random_interactions(rng, 6, 4))
    u, sv, v = exact_svd(adj.to_dense())
    f = LowRankFactors.from_usv(u, sv, v)
    s = forward(_state(rng.standard_normal((6, 3)), rng.standard_normal((4, 3))), adj, f, EdgeDropoutMask.full(adj.nnz))
    for l in range(3):
        np.testing.assert_allclose(s.g_user[l], s.z_user[l], atol=1e-8)
        np.testing.assert_allclose(s.g_item[l], s.z_item[l], atol=1e-8)


# --- scoring ----------------------------------------------------------------------

def _scored(e_user, e_item):
    s = _state(e_user, e_item)
    s.e_user, s.e_item = s.user0, s.item0
    return s


def test_score_by_hand():
    assert score(_scored([[1.0, 2.0]], [[3.0, -1.0]]), 0, 0) == 1.0
    assert score(_scored([[3.0, -1.0]], [[1.0, 2.0]]), 0, 0) == 1.0


def test_score_orthogonal():
    assert score(_scored([[1.0, 0.0]], [[0.0, 5.0]]), 0, 0) == 0.0


def test_score_out_of_range():
    s = _scored([[1.0]], [[1.0]])
    with pytest.raises(IndexError):
        score(s, 0, 1)
    with pytest.raises(IndexError):
        score_all(s, -1)


def test_score_requires_forward():
    with pytest.raises(RuntimeError):
        score(_state([[1.0]], [[1.0]]), 0, 0)


def test_score_all_consistent(rng):
    s = _scored(rng.standard_normal((3, 4)), rng.standard_normal((5, 4)))
    for u in range(3):
        np.testing.assert_allclose(score_all(s, u), [score(s, u, j) for j in range(5)], rtol=1e-12, atol=1e-14)
    single = _scored([[1.0, 2.0]], [[3.0, 4.0]])
    assert score_all(single, 0).tolist() == [score(single, 0, 0)]
    zero = _scored(np.zeros((1, 4)), rng.standard_normal((5, 4)))
    assert not score_all(zero, 0).any()


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    s = init_embeddings(4, 7, 3, seed=5, n_layers=3)
    save_checkpoint(s, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"LGCLCKPT"
    assert np.frombuffer(raw[8:48], dtype="<u8").tolist() == [1, 4, 7, 3, 3]
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.n_layers == 3
    assert back.user0.tobytes() == s.user0.tobytes() and back.item0.tobytes() == s.item0.tobytes()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!" + bytes(40))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.bin")
    save_checkpoint(init_embeddings(2, 2, 2, 0), tmp_path / "c.bin")
    (tmp_path / "t.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-4])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "t.bin")
