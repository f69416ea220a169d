"""Full-ranking Recall/NDCG, degree-group analyses, and embedding dispersion (MAD)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionSet, assign_groups
from .errors import DataError

DEFAULT_NS = (20, 40)


def recall_at_n(topn, test_items) -> float:
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    return len(test.intersection(int(i) for i in topn)) / len(test)


def ndcg_at_n(topn, test_items, n=None) -> float:
    """Binary-relevance NDCG; the ideal list has min(n, |test|) hits at the top."""
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    n = len(topn) if n is None else n
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(topn[:n]) if int(item) in test)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(n, len(test))))
    return float(dcg / idcg) if idcg > 0 else 0.0


def decomposed_recall(topn, test_items, item_group, group) -> float:
    """Hits among recommended items of one popularity group, over the full test size."""
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    item_group = np.asarray(item_group)
    hits = sum(1 for i in topn if item_group[int(i)] == group and int(i) in test)
    return hits / len(test)


def rank_items(scores, exclude, n):
    """Top-n item ids by descending score; ties go to the smaller id; ``exclude`` never appears."""
    s = np.array(scores, dtype=np.float64, copy=True)
    s[np.asarray(exclude, dtype=np.int64)] = -np.inf
    order = np.argsort(-s, kind="stable")
    n_cand = s.size - np.count_nonzero(np.isneginf(s))
    return order[:min(n, n_cand)]


@dataclass
class MetricsReport:
    ns: tuple
    recall: dict
    ndcg: dict
    n_users: int
    boundaries: tuple | None = None
    user_group_recall: dict = field(default_factory=dict)   # group -> {N: recall}
    user_group_ndcg: dict = field(default_factory=dict)
    user_group_count: dict = field(default_factory=dict)
    item_group_recall: dict = field(default_factory=dict)   # group -> {N: decomposed recall}
    mad: float | None = None

    def to_dict(self):
        def keyed(v):
            if isinstance(v, dict):
                return {str(k): keyed(x) for k, x in v.items()}
            if isinstance(v, float) and np.isnan(v):
                return None  # empty group
            return v

        return {
            "n_users": self.n_users,
            "ns": list(self.ns),
            "recall": keyed(self.recall),
            "ndcg": keyed(self.ndcg),
            "boundaries": list(self.boundaries) if self.boundaries is not None else None,
            "user_groups": {
                "count": keyed(self.user_group_count),
                "recall": keyed(self.user_group_recall),
                "ndcg": keyed(self.user_group_ndcg),
            },
            "item_groups": {"decomposed_recall": keyed(self.item_group_recall)},
            "mad": keyed(self.mad),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def tsv_rows(self):
        rows = [("scope", "group", "metric", "n", "value")]
        for n in self.ns:
            rows.append(("overall", "all", "recall", n, self.recall[n]))
            rows.append(("overall", "all", "ndcg", n, self.ndcg[n]))
        for g in sorted(self.user_group_recall):
            for n in self.ns:
                rows.append(("user_degree", g, "recall", n, self.user_group_recall[g][n]))
                rows.append(("user_degree", g, "ndcg", n, self.user_group_ndcg[g][n]))
        for g in sorted(self.item_group_recall):
            for n in self.ns:
                rows.append(("item_popularity", g, "decomposed_recall", n, self.item_group_recall[g][n]))
        if self.mad is not None:
            rows.append(("overall", "all", "mad", "", self.mad))
        return rows

    def to_tsv(self):
        return "".join("\t".join(str(c) for c in r) + "\n" for r in self.tsv_rows())


def _nan_mean(xs):
    # exactly rounded sums keep the averages independent of chunking and summation order
    return math.fsum(xs) / len(xs) if len(xs) else float("nan")


def evaluate_embeddings(e_user, e_item, known: InteractionSet, test: InteractionSet,
                        ns=DEFAULT_NS, boundaries=None, chunk=1024) -> MetricsReport:
    """Rank all items minus each user's known items and average metrics over users with test items.

    ``known`` holds the interactions excluded from ranking (usually the train
    split). With ``boundaries``, users are grouped by known-degree and items by
    popularity in ``known``.
    """
    ns = tuple(int(n) for n in ns)
    n_max = max(ns)
    test_off = test.user_offsets()
    known_off = known.user_offsets()
    users = np.flatnonzero(np.diff(test_off) > 0)
    if users.size == 0:
        raise DataError("no user has a test interaction")
    if boundaries is not None:
        boundaries = tuple(boundaries)
        user_group = assign_groups(known.user_degrees(), boundaries)
        item_group = assign_groups(known.item_degrees(), boundaries)
        n_groups = len(boundaries) + 1

    per_user_recall = {n: [] for n in ns}
    per_user_ndcg = {n: [] for n in ns}
    decomposed = {}
    if boundaries is not None:
        decomposed = {g: {n: [] for n in ns} for g in range(n_groups)}
    discounts = 1.0 / np.log2(np.arange(2, n_max + 2))
    e_user = np.asarray(e_user, dtype=np.float64)
    e_item = np.asarray(e_item, dtype=np.float64)
    for start in range(0, users.size, chunk):
        block = users[start:start + chunk]
        scores = e_user[block] @ e_item.T
        for row, u in enumerate(block):
            exclude = known.items[known_off[u]:known_off[u + 1]]
            top = rank_items(scores[row], exclude, n_max)
            t_items = test.items[test_off[u]:test_off[u + 1]]
            hit = np.isin(top, t_items)
            for n in ns:
                h = hit[:n]
                per_user_recall[n].append(int(h.sum()) / t_items.size)
                idcg = math.fsum(discounts[:min(n, t_items.size)])
                per_user_ndcg[n].append(math.fsum(discounts[:h.size][h]) / idcg)
                if boundaries is not None:
                    groups_hit = item_group[top[:n][h]]
                    counts = np.bincount(groups_hit, minlength=n_groups)
                    for g in range(n_groups):
                        decomposed[g][n].append(int(counts[g]) / t_items.size)

    report = MetricsReport(
        ns=ns,
        recall={n: _nan_mean(per_user_recall[n]) for n in ns},
        ndcg={n: _nan_mean(per_user_ndcg[n]) for n in ns},
        n_users=int(users.size),
        boundaries=boundaries,
    )
    if boundaries is not None:
        ug = user_group[users]
        for g in range(n_groups):
            sel = np.flatnonzero(ug == g)
            report.user_group_count[g] = int(sel.size)
            report.user_group_recall[g] = {n: _nan_mean(np.asarray(per_user_recall[n])[sel]) for n in ns}
            report.user_group_ndcg[g] = {n: _nan_mean(np.asarray(per_user_ndcg[n])[sel]) for n in ns}
            report.item_group_recall[g] = {n: _nan_mean(decomposed[g][n]) for n in ns}
    return report


def evaluate(state, train: InteractionSet, test: InteractionSet, ns=DEFAULT_NS, boundaries=None,
             with_mad=False, mad_sample=2000, seed=0) -> MetricsReport:
    """Metrics from the final embeddings of ``state`` (run a full-graph forward pass first)."""
    if state.e_user is None:
        raise RuntimeError("run a forward pass before evaluation")
    report = evaluate_embeddings(state.e_user, state.e_item, train, test, ns, boundaries)
    if with_mad:
        report.mad = mad(np.vstack([state.e_user, state.e_item]), mad_sample, seed)
    return report


def mad(embeddings, sample=2000, seed=0) -> float:
    """Mean over nodes of the mean cosine distance to the other (sampled) nodes."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("MAD needs at least two rows")
    if sample is not None and x.shape[0] > sample:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(x.shape[0], sample, replace=False))]
    norms = np.linalg.norm(x, axis=1)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    unit = x * inv[:, None]
    dist = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(dist, 0.0)
    n = x.shape[0]
    return float(np.mean(dist.sum(axis=1) / (n - 1)))
