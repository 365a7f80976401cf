"""Fed-NCF and Fed-LightGCN scoring with hand-written backpropagation.

Both models feed ``concat(user_repr, item_repr)`` through the shared MLP head
``Linear -> ReLU -> ... -> Linear(1)`` and a sigmoid. LightGCN builds the
representations with one round of symmetric-normalized propagation over the
client's own bipartite graph (the user plus its train positives) and averages
layer 0 with layer 1. On that star graph the user has degree ``n`` and each
item degree 1, so every edge carries weight ``1/sqrt(n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-7
MODELS = ("ncf", "lightgcn")
HEADS = ("mlp", "dot")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class PublicParams:
    """Item embedding table and MLP weights ``W0, b0, W1, b1, ...``."""

    item_emb: np.ndarray
    theta: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.item_emb.shape[1]

    def copy(self) -> "PublicParams":
        return PublicParams(self.item_emb.copy(), {k: v.copy() for k, v in self.theta.items()})

    def num_layers(self) -> int:
        return len(self.theta) // 2


def layer_names(n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        names += [f"W{i}", f"b{i}"]
    return names


def init_public(num_items: int, dim: int, hidden: list[int] | tuple[int, ...], rng: np.random.Generator,
                init_std: float = 0.1) -> PublicParams:
    """Gaussian item embeddings and He-initialized MLP.

    ``hidden`` lists the layer input widths, e.g. ``[64, 32, 16]`` for a
    ``64 -> 32 -> 16 -> 1`` head; its first entry must equal ``2 * dim``.
    """
    hidden = list(hidden)
    if hidden and hidden[0] != 2 * dim:
        raise ValueError(f"first layer width {hidden[0]} must equal 2*dim={2 * dim}")
    widths = hidden + [1]
    theta = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        theta[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        theta[f"b{i}"] = np.zeros(fan_out)
    item_emb = rng.normal(0.0, init_std, size=(num_items, dim))
    return PublicParams(item_emb, theta)


def mlp_forward(theta, x):
    """Return logits ``(n,)`` and the activation cache for :func:`mlp_backward`."""
    n_layers = len(theta) // 2
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ theta[f"W{i}"] + theta[f"b{i}"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h[..., 0], acts


def mlp_backward(theta, acts, dz):
    n_layers = len(theta) // 2
    grads = {}
    g = dz[..., None]
    for i in reversed(range(n_layers)):
        inp = acts[i]
        grads[f"W{i}"] = inp.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ theta[f"W{i}"].T
        if i > 0:
            g = g * (acts[i] > 0)
    return grads, g


def scatter_rows(ids, rows, dim):
    """Sum rows sharing an item id; returns sorted unique ids and summed rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids, np.zeros((0, dim))
    uniq, inv = np.unique(ids, return_inverse=True)
    out = np.zeros((uniq.size, dim))
    np.add.at(out, inv, rows)
    return uniq, out


@dataclass(frozen=True)
class LocalGraph:
    """One user's star graph: edges from the user to its train positives."""

    items: np.ndarray

    @classmethod
    def of(cls, items) -> "LocalGraph":
        return cls(np.unique(np.asarray(items, dtype=np.int64)))

    @property
    def norm(self) -> float:
        return 1.0 / np.sqrt(self.items.size) if self.items.size else 0.0


EMPTY_GRAPH = LocalGraph(np.empty(0, dtype=np.int64))


@dataclass
class _Forward:
    items: np.ndarray
    u_rep: np.ndarray
    in_graph: np.ndarray
    logits: np.ndarray
    acts: list | None
    v_rep: np.ndarray


class Recommender:
    """Stateless scorer for one architecture.

    ``kind`` is ``"ncf"`` or ``"lightgcn"``; ``head`` is ``"mlp"`` (default
    for both) or ``"dot"`` for inner-product scoring.
    """

    def __init__(self, kind: str = "ncf", head: str = "mlp"):
        if kind not in MODELS:
            raise ValueError(f"unknown model {kind!r}; expected one of {MODELS}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        self.kind = kind
        self.head = head

    def __repr__(self):
        return f"Recommender({self.kind!r}, head={self.head!r})"

    # representations ---------------------------------------------------
    def user_repr(self, u, item_emb, graph: LocalGraph):
        if self.kind == "ncf":
            return u
        if graph.items.size == 0:
            return 0.5 * u
        return 0.5 * (u + graph.norm * item_emb[graph.items].sum(axis=0))

    def _forward(self, u, pub: PublicParams, graph: LocalGraph, items) -> _Forward:
        items = np.asarray(items, dtype=np.int64)
        u_rep = self.user_repr(u, pub.item_emb, graph)
        v = pub.item_emb[items]
        if self.kind == "lightgcn":
            in_graph = np.isin(items, graph.items)
            v_rep = 0.5 * v
            if in_graph.any():
                v_rep = v_rep + np.outer(in_graph, 0.5 * graph.norm * u)
        else:
            in_graph = np.zeros(items.size, dtype=bool)
            v_rep = v
        if self.head == "dot":
            return _Forward(items, u_rep, in_graph, v_rep @ u_rep, None, v_rep)
        x = np.concatenate([np.broadcast_to(u_rep, v_rep.shape), v_rep], axis=1)
        logits, acts = mlp_forward(pub.theta, x)
        return _Forward(items, u_rep, in_graph, logits, acts, v_rep)

    def logits(self, u, pub: PublicParams, graph: LocalGraph, items) -> np.ndarray:
        return self._forward(u, pub, graph, items).logits

    def score(self, u, pub: PublicParams, graph: LocalGraph, items) -> np.ndarray:
        """Predicted preference in (0, 1) for each item id."""
        items = np.atleast_1d(items)
        if items.size and (items.min() < 0 or items.max() >= pub.num_items):
            raise IndexError("item id out of range")
        return sigmoid(self.logits(u, pub, graph, items))

    def backward(self, u, pub: PublicParams, graph: LocalGraph, items, dlogits):
        """Pull ``dL/dlogit`` back to ``(grad_u, (item_ids, item_rows), grad_theta)``."""
        fw = self._forward(u, pub, graph, items)
        return self._backward(fw, u, pub, graph, np.asarray(dlogits, dtype=np.float64))

    def _backward(self, fw: _Forward, u, pub, graph, dlogits):
        d = pub.dim
        if self.head == "dot":
            du_rep = dlogits @ fw.v_rep
            dv_rep = np.outer(dlogits, fw.u_rep)
            grad_theta = {k: np.zeros_like(v) for k, v in pub.theta.items()}
        else:
            grad_theta, dx = mlp_backward(pub.theta, fw.acts, dlogits)
            du_rep = dx[:, :d].sum(axis=0)
            dv_rep = dx[:, d:]
        if self.kind == "ncf":
            ids, rows = scatter_rows(fw.items, dv_rep, d)
            return du_rep, (ids, rows), grad_theta
        # LightGCN: u_rep = (u + c*sum_g v_g)/2 ; v_rep_j = (v_j + [j in G] c*u)/2
        c = graph.norm
        grad_u = 0.5 * du_rep + 0.5 * c * dv_rep[fw.in_graph].sum(axis=0)
        id_parts = [fw.items]
        row_parts = [0.5 * dv_rep]
        if graph.items.size:
            id_parts.append(graph.items)
            row_parts.append(np.broadcast_to(0.5 * c * du_rep, (graph.items.size, d)))
        ids, rows = scatter_rows(np.concatenate(id_parts), np.concatenate(row_parts), d)
        return grad_u, (ids, rows), grad_theta

    # losses ------------------------------------------------------------
    def rec_loss_and_grads(self, u, pub: PublicParams, graph: LocalGraph, items, labels):
        """Binary cross-entropy over ``(item, label)`` pairs and its exact gradients.

        Returns ``(loss, grad_u, (item_ids, item_rows), grad_theta, n_clamped)``.
        Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log;
        clamped samples contribute zero gradient.
        """
        items = np.asarray(items, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.float64)
        if items.size == 0:
            raise ValueError("empty batch")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        fw = self._forward(u, pub, graph, items)
        p = sigmoid(fw.logits)
        clamped = (p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)
        pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        loss = float(-np.sum(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)))
        dlogits = np.where(clamped, 0.0, p - labels)
        grad_u, grad_v, grad_theta = self._backward(fw, u, pub, graph, dlogits)
        return loss, grad_u, grad_v, grad_theta, int(clamped.sum())

    # ranking -----------------------------------------------------------
    def all_logits(self, u, pub: PublicParams, graph: LocalGraph) -> np.ndarray:
        return self.logits(u, pub, graph, np.arange(pub.num_items))

    def top_k(self, u, pub: PublicParams, graph: LocalGraph, exclude, k: int) -> np.ndarray:
        """The ``k`` highest-scoring non-excluded items, ties by ascending id."""
        exclude = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
        n_cand = pub.num_items - np.unique(exclude).size
        if k > n_cand:
            raise ValueError(f"k={k} exceeds {n_cand} candidate items")
        return rank_top_k(self.all_logits(u, pub, graph), exclude, k)

    def logit_matrix(self, users, pub: PublicParams, graphs) -> np.ndarray:
        """Logits for every (user, item) pair; ``users`` is ``(n, d)``."""
        users = np.asarray(users, dtype=np.float64)
        n = users.shape[0]
        if self.kind == "ncf":
            u_rep = users
        else:
            u_rep = np.stack([self.user_repr(users[i], pub.item_emb, graphs[i]) for i in range(n)])
        v_rep = pub.item_emb if self.kind == "ncf" else 0.5 * pub.item_emb
        if self.head == "dot":
            out = u_rep @ v_rep.T
        else:
            out = _mlp_pairwise(pub.theta, u_rep, v_rep)
        if self.kind == "lightgcn":
            # items inside a user's own graph carry the extra propagated term
            for i in range(n):
                g = graphs[i]
                if g.items.size:
                    out[i, g.items] = self.logits(users[i], pub, g, g.items)
        return out


def _mlp_pairwise(theta, u_rep, v_rep):
    d = u_rep.shape[1]
    w0 = theta["W0"]
    h = (u_rep @ w0[:d])[:, None, :] + (v_rep @ w0[d:])[None, :, :] + theta["b0"]
    n_layers = len(theta) // 2
    for i in range(1, n_layers):
        h = np.maximum(h, 0.0)
        h = h @ theta[f"W{i}"] + theta[f"b{i}"]
    return h[..., 0]


def rank_top_k(logits, exclude, k: int) -> np.ndarray:
    scores = np.array(logits, dtype=np.float64, copy=True)
    ids = np.arange(scores.size)
    keep = np.ones(scores.size, dtype=bool)
    exclude = np.asarray(exclude, dtype=np.int64)
    if exclude.size:
        keep[exclude] = False
    cand = ids[keep]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]
