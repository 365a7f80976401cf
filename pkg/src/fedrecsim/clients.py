"""Client-side training: benign local steps and synthetic-user fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import AdamState, NumericError, ParamSet, adam_step
from .models import LocalGraph, PublicParams, Recommender
from .updates import GradientUpdate


@dataclass
class ClientState:
    """Private state of one client; never handed to the server."""

    user: int
    embedding: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    role: str = "benign"
    adam: AdamState | None = None
    graph: LocalGraph = field(init=False)

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.int64)
        self.negatives = np.asarray(self.negatives, dtype=np.int64)
        self.graph = LocalGraph.of(self.positives)
        if self.adam is None:
            self.adam = AdamState.zeros_like(self.embedding)

    def samples(self):
        items = np.concatenate([self.positives, self.negatives])
        labels = np.concatenate([np.ones(self.positives.size), np.zeros(self.negatives.size)])
        return items, labels


@dataclass
class LocalResult:
    update: GradientUpdate
    loss: float
    n_samples: int
    clamped: int = 0


def _localize(pub: PublicParams, rows: np.ndarray):
    """Public params restricted to ``rows``; item ids are remapped to 0..len(rows)-1."""
    return PublicParams(pub.item_emb[rows].copy(), {k: v.copy() for k, v in pub.theta.items()})


def benign_local_step(model: Recommender, client: ClientState, pub: PublicParams, local_epochs: int,
                      lr: float, rng: np.random.Generator, batch_size: int = 0) -> LocalResult:
    """Train on the client's slice and upload the pseudo-gradient ``(before - after) / lr``.

    The private embedding follows the client's persistent Adam state; the
    local copies of the public parameters get a fresh Adam state each round.
    ``batch_size=0`` means one full-batch step per local epoch.
    """
    items, labels = client.samples()
    if local_epochs == 0 or items.size == 0:
        return LocalResult(GradientUpdate.zeros(pub, client.user), 0.0, 0)
    rows = np.unique(items)
    local_items = np.searchsorted(rows, items)
    graph = LocalGraph(np.searchsorted(rows, client.graph.items))
    local = _localize(pub, rows)
    public = ParamSet({"V": local.item_emb, **local.theta})
    private = ParamSet({"u": client.embedding}, {"u": client.adam})
    n = items.size
    bs = n if batch_size <= 0 else min(batch_size, n)
    total_loss = 0.0
    clamped = 0
    for _ in range(local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            cur = PublicParams(public["V"], {k: public[k] for k in local.theta})
            loss, g_u, (g_ids, g_rows), g_theta, n_cl = model.rec_loss_and_grads(
                private["u"], cur, graph, local_items[idx], labels[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(g_u)) or not np.all(np.isfinite(g_rows)):
                raise NumericError(f"non-finite gradient on client {client.user}")
            g_v = np.zeros_like(public["V"])
            g_v[g_ids] = g_rows
            adam_step(private, {"u": g_u}, lr)
            adam_step(public, {"V": g_v, **g_theta}, lr)
            total_loss += loss
            clamped += n_cl
    client.embedding = private["u"]
    client.adam = private.states["u"]
    delta_v = (local.item_emb - public["V"]) / lr
    delta_theta = {k: (pub.theta[k] - public[k]) / lr for k in pub.theta}
    update = GradientUpdate(rows, delta_v, delta_theta, client.user)
    update.check_finite()
    return LocalResult(update, total_loss / (n * local_epochs), n * local_epochs, clamped)


def fit_user(model: Recommender, pub: PublicParams, positives, negatives, rng: np.random.Generator,
             steps: int = 50, lr: float = 0.05, init_std: float = 0.01, u0=None) -> np.ndarray:
    """Fit a user embedding to a synthetic profile with the public parameters frozen."""
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    u = rng.normal(0.0, init_std, size=pub.dim) if u0 is None else np.array(u0, dtype=np.float64)
    graph = LocalGraph.of(positives)
    items = np.concatenate([positives, negatives])
    labels = np.concatenate([np.ones(positives.size), np.zeros(negatives.size)])
    ps = ParamSet({"u": u})
    for _ in range(steps):
        _, g_u, _, _, _ = model.rec_loss_and_grads(ps["u"], pub, graph, items, labels)
        adam_step(ps, {"u": g_u}, lr)
    return ps["u"]


def synthetic_profile(num_items: int, alpha: int, rng: np.random.Generator, exclude=(), neg_ratio: int = 4):
    """``alpha`` random positives outside ``exclude`` and ``neg_ratio`` negatives per positive."""
    exclude = np.asarray(list(exclude), dtype=np.int64)
    pool = np.setdiff1d(np.arange(num_items), exclude)
    alpha = min(alpha, pool.size)
    pos = np.sort(rng.choice(pool, size=alpha, replace=False))
    rest = np.setdiff1d(pool, pos)
    n_neg = min(neg_ratio * alpha, rest.size)
    neg = np.sort(rng.choice(rest, size=n_neg, replace=False)) if n_neg else np.empty(0, dtype=np.int64)
    return pos, neg
