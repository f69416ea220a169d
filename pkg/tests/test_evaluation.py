import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lightgcl.data import InteractionSet
from lightgcl.errors import DataError
from lightgcl.evaluation import (
    decomposed_recall, evaluate, evaluate_embeddings, mad, ndcg_at_n, rank_items, recall_at_n,
)
from lightgcl.model import EmbeddingState

from instances import metric_instance
from oracle import brute_force_metrics


# --- per-user metrics ------------------------------------------------------------

def test_recall_examples():
    assert recall_at_n([3, 1, 2], {1, 2}) == 1.0
    assert recall_at_n([5, 0, 7], {0, 9}) == 0.5
    assert recall_at_n([1, 2], {3}) == 0.0
    with pytest.raises(ValueError):
        recall_at_n([1], set())


def test_ndcg_examples():
    assert ndcg_at_n([4, 1, 2], {4}) == 1.0
    assert ndcg_at_n([1, 2, 4], {4}) == pytest.approx(0.5, abs=1e-15)
    assert ndcg_at_n([1, 2, 3], {4}) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_n([1], [])


def test_ndcg_perfect_iff_ideal_order():
    assert ndcg_at_n([7, 8, 1], {7, 8}) == 1.0
    assert ndcg_at_n([7, 1, 8], {7, 8}) < 1.0
    assert ndcg_at_n([7, 8], {7, 8, 9}) == 1.0  # only min(N, |test|) slots count


def test_decomposed_examples():
    group = np.array([0, 1, 0, 1])
    assert decomposed_recall([0, 1, 2], {0, 1}, group, 0) == 0.5
    assert decomposed_recall([0, 1, 2], {0, 1}, group, 1) == 0.5
    assert decomposed_recall([0, 3], {0, 3}, np.zeros(4, int), 0) == recall_at_n([0, 3], {0, 3})


@given(st.integers(0, 2**32 - 1))
def test_decomposition_sums_per_user(seed):
    rng = np.random.default_rng(seed)
    group = rng.integers(0, 3, size=30)
    top = rng.permutation(30)[:10]
    test = set(rng.choice(30, size=int(rng.integers(1, 8)), replace=False).tolist())
    parts = sum(decomposed_recall(top, test, group, g) for g in range(3))
    assert parts == pytest.approx(recall_at_n(top, test), abs=1e-12)


def test_rank_items_ties_and_exclusion():
    top = rank_items([1.0, 3.0, 3.0, 0.0, 3.0], exclude=[2], n=3)
    assert top.tolist() == [1, 4, 0]
    assert rank_items([1.0, 2.0], exclude=[0, 1], n=5).size == 0


# --- full evaluation ----------------------------------------------------------------

def test_perfect_model_recall():
    known = InteractionSet.from_pairs(2, 6, [0, 1], [0, 1])
    test = InteractionSet.from_pairs(2, 6, [0, 0, 0, 1], [2, 3, 4, 5])
    e_user = np.eye(2)
    e_item = np.zeros((6, 2))
    e_item[[2, 3, 4], 0] = 1.0
    e_item[5, 1] = 1.0
    rep = evaluate_embeddings(e_user, e_item, known, test, ns=(2, 20))
    assert rep.recall[2] == pytest.approx((2 / 3 + 1) / 2)
    assert rep.recall[20] == 1.0 and rep.ndcg[20] == 1.0


def test_no_evaluable_user():
    known = InteractionSet.from_pairs(2, 2, [0], [0])
    with pytest.raises(DataError):
        evaluate_embeddings(np.ones((2, 1)), np.ones((2, 1)), known, known.with_pairs([], []))


@pytest.mark.parametrize("seed", range(10))
def test_matches_oracle(seed):
    known, test, eu, ev = metric_instance(seed)
    bounds = (2, 5)
    rep = evaluate_embeddings(eu, ev, known, test, ns=(1, 5, 20), boundaries=bounds)
    ref = brute_force_metrics(eu.tolist(), ev.tolist(), known.pairs.tolist(), test.pairs.tolist(),
                              (1, 5, 20), bounds)
    assert rep.recall == ref["recall"]
    assert rep.ndcg == ref["ndcg"]
    assert rep.item_group_recall == ref["decomposed"]


def test_chunking_does_not_change_results():
    known, test, eu, ev = metric_instance(4)
    a = evaluate_embeddings(eu, ev, known, test, boundaries=(3,), chunk=1)
    b = evaluate_embeddings(eu, ev, known, test, boundaries=(3,), chunk=1000)
    assert a.to_json() == b.to_json()


@given(st.integers(0, 2**32 - 1))
def test_report_invariants(seed):
    known, test, eu, ev = metric_instance(seed, max_nodes=25)
    rep = evaluate_embeddings(eu, ev, known, test, ns=(3, 10), boundaries=(2, 4))
    for n in rep.ns:
        assert 0.0 <= rep.recall[n] <= 1.0 and 0.0 <= rep.ndcg[n] <= 1.0
        assert sum(rep.item_group_recall[g][n] for g in range(3)) == pytest.approx(rep.recall[n], abs=1e-12)
        counts = rep.user_group_count
        weighted = sum(counts[g] * rep.user_group_recall[g][n] for g in counts if counts[g])
        assert weighted / rep.n_users == pytest.approx(rep.recall[n], abs=1e-12)


def test_report_serialization():
    known, test, eu, ev = metric_instance(1)
    rep = evaluate_embeddings(eu, ev, known, test, ns=(20,), boundaries=(1000,))
    d = json.loads(rep.to_json())
    assert d["recall"]["20"] == rep.recall[20]
    assert d["user_groups"]["recall"]["1"]["20"] is None  # empty group
    rows = rep.tsv_rows()
    assert rows[0] == ("scope", "group", "metric", "n", "value")
    assert rep.to_tsv().count("\n") == len(rows)


def test_evaluate_uses_final_embeddings_and_mad():
    known, test, eu, ev = metric_instance(2)
    state = EmbeddingState(eu, ev, 0)
    with pytest.raises(RuntimeError):
        evaluate(state, known, test)
    state.e_user, state.e_item = eu, ev
    rep = evaluate(state, known, test, ns=(5,), with_mad=True)
    assert rep.recall == evaluate_embeddings(eu, ev, known, test, ns=(5,)).recall
    assert 0.0 <= rep.mad <= 2.0


# --- MAD -------------------------------------------------------------------------------

def test_mad_examples():
    assert mad(np.tile([[1.0, 2.0]], (5, 1))) == pytest.approx(0.0, abs=1e-15)
    assert mad(np.eye(2)) == 1.0
    assert mad(np.array([[1.0, 0.0], [-1.0, 0.0]])) == 2.0
    with pytest.raises(ValueError):
        mad(np.ones((1, 3)))


def test_mad_zero_rows_count_as_orthogonal():
    assert mad(np.array([[0.0, 0.0], [1.0, 0.0]])) == 1.0


@given(st.integers(0, 2**32 - 1))
def test_mad_range_and_row_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((int(rng.integers(2, 30)), 4))
    m = mad(x)
    assert 0.0 <= m <= 2.0
    scaled = x * rng.uniform(0.01, 100.0, size=(x.shape[0], 1))
    assert mad(scaled) == pytest.approx(m, abs=1e-12)


def test_mad_sampling_is_seeded():
    x = np.random.default_rng(0).standard_normal((300, 3))
    assert mad(x, sample=50, seed=1) == mad(x, sample=50, seed=1)
    assert mad(x, sample=50, seed=1) != mad(x, sample=50, seed=2)
