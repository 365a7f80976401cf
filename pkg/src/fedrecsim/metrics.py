"""Exposure ratio, hit ratio and the synthetic-vs-real popularity overlap."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .clients import fit_user, synthetic_profile
from .models import LocalGraph, PublicParams, Recommender


@dataclass
class MetricSnapshot:
    epoch: int
    er: dict[int, float | None] = field(default_factory=dict)
    er_mean: float | None = None
    hr: float = 0.0
    jaccard: float | None = None


@dataclass
class EvalUsers:
    """What the evaluator needs per benign user: embedding, graph, train positives, test items."""

    embeddings: np.ndarray
    graphs: list[LocalGraph]
    train: list[np.ndarray]
    test: list[np.ndarray]


def top_k_lists(model: Recommender, users: EvalUsers, pub: PublicParams, k: int) -> np.ndarray:
    """``(n_users, k)`` recommendation lists excluding each user's train positives."""
    logits = model.logit_matrix(users.embeddings, pub, users.graphs)
    for i, pos in enumerate(users.train):
        logits[i, pos] = -np.inf
    # stable sort keeps ascending item id among equal scores
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def exposure_ratio(model: Recommender, users: EvalUsers, pub: PublicParams, targets, k: int = 5,
                   lists: np.ndarray | None = None):
    """Per-target ER@K and their mean over defined targets.

    A target's denominator counts users who have not interacted with it;
    targets with an empty denominator map to ``None`` and are left out of the mean.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if lists is None:
        lists = top_k_lists(model, users, pub, k)
    lists = lists[:, :k]
    per_target: dict[int, float | None] = {}
    for t in targets:
        t = int(t)
        eligible = np.array([t not in set(pos.tolist()) for pos in users.train])
        n = int(eligible.sum())
        if n == 0:
            per_target[t] = None
            continue
        hit = (lists == t).any(axis=1) & eligible
        per_target[t] = float(hit.sum()) / n
    defined = [v for v in per_target.values() if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return per_target, mean


def hit_ratio(model: Recommender, users: EvalUsers, pub: PublicParams, k: int = 20,
              lists: np.ndarray | None = None) -> float:
    """Fraction of (user, held-out item) pairs ranked inside the user's top-K."""
    if lists is None:
        lists = top_k_lists(model, users, pub, k)
    lists = lists[:, :k]
    hits = total = 0
    for i, test in enumerate(users.test):
        if test.size == 0:
            continue
        total += test.size
        hits += int(np.isin(test, lists[i]).sum())
    return hits / total if total else 0.0


def popular_items(lists: np.ndarray, n: int = 10) -> set[int]:
    """The ``n`` items appearing most often across recommendation lists, ties by id."""
    counts = Counter(int(i) for i in np.asarray(lists).ravel())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {i for i, _ in ranked[:n]}


def jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def synthetic_users(model: Recommender, pub: PublicParams, n_synth: int, alpha: int, rng: np.random.Generator,
                    fit_steps: int = 50, fit_lr: float = 0.05, init_std: float = 0.01) -> EvalUsers:
    embs, graphs, train = [], [], []
    for _ in range(n_synth):
        pos, neg = synthetic_profile(pub.num_items, alpha, rng)
        embs.append(fit_user(model, pub, pos, neg, rng, steps=fit_steps, lr=fit_lr, init_std=init_std))
        graphs.append(LocalGraph.of(pos))
        train.append(pos)
    return EvalUsers(np.array(embs), graphs, train, [np.empty(0, dtype=np.int64)] * n_synth)


def jaccard_popularity(model: Recommender, real: EvalUsers, pub: PublicParams, n_synth: int, k: int = 10,
                       alpha: int = 30, seed: int = 0, **fit_kw) -> float:
    """Jaccard overlap of the top-``k`` most recommended items for real vs synthetic users."""
    if n_synth < 1:
        raise ValueError("n_synth must be >= 1")
    rng = np.random.default_rng(seed)
    synth = synthetic_users(model, pub, n_synth, alpha, rng, **fit_kw)
    a = popular_items(top_k_lists(model, real, pub, k), k)
    b = popular_items(top_k_lists(model, synth, pub, k), k)
    return jaccard(a, b)
