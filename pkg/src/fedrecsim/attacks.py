"""Target-item promotion attacks run by malicious clients.

Every attack sees only the public parameters it is sent each round. The
synthetic-user attacks (``psmu``, ``psmu-no-ap``, ``gaussian-proxy``) and
``explicit-boost`` upload item rows for the targets only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clients import ClientState, benign_local_step, fit_user, synthetic_profile
from .models import LocalGraph, PublicParams, Recommender, sigmoid
from .updates import GradientUpdate

ATTACKS = ("none", "psmu", "psmu-no-ap", "random", "explicit-boost", "gaussian-proxy")


@dataclass
class AttackConfig:
    targets: tuple[int, ...] = ()
    alpha: int = 30
    num_alternatives: int = 5
    start_epoch: int = 8
    top_k: int = 5
    fit_steps: int = 50
    fit_lr: float = 0.05
    fit_init_std: float = 0.01
    poison_steps: int = 10
    poison_lr: float | None = None
    poison_theta_lr: float | None = None
    neg_ratio: int = 4

    def __post_init__(self):
        self.targets = tuple(int(t) for t in self.targets)
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.num_alternatives < 0:
            raise ValueError("num_alternatives must be >= 0")


@dataclass
class SyntheticUser:
    user: int
    positives: np.ndarray
    negatives: np.ndarray
    embedding: np.ndarray
    graph: LocalGraph = field(init=False)

    def __post_init__(self):
        self.graph = LocalGraph.of(self.positives)


def attack_loss(model: Recommender, u, pub: PublicParams, graph: LocalGraph, targets, competitors):
    """``sum_t sum_j sigmoid(z_j - z_t)`` over targets ``t`` and competitors ``j``.

    ``z`` are pre-sigmoid scores. Returns ``(loss, (item_ids, item_rows), grad_theta)``.
    """
    targets = np.asarray(list(targets), dtype=np.int64)
    competitors = np.asarray(list(competitors), dtype=np.int64)
    if np.intersect1d(targets, competitors).size:
        raise ValueError("competitors overlap targets")
    items = np.concatenate([competitors, targets])
    if targets.size == 0 or competitors.size == 0:
        zero = {k: np.zeros_like(v) for k, v in pub.theta.items()}
        return 0.0, (np.empty(0, dtype=np.int64), np.zeros((0, pub.dim))), zero
    z = model.logits(u, pub, graph, items)
    zc, zt = z[: competitors.size], z[competitors.size:]
    s = sigmoid(zc[:, None] - zt[None, :])
    ds = s * (1.0 - s)
    dlogits = np.concatenate([ds.sum(axis=1), -ds.sum(axis=0)])
    _, grad_v, grad_theta = model.backward(u, pub, graph, items, dlogits)
    return float(s.sum()), grad_v, grad_theta


def cosine_to_targets(item_emb, targets) -> np.ndarray:
    """Max cosine similarity of each item row to any target row (0 for zero rows)."""
    norms = np.linalg.norm(item_emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = item_emb / safe[:, None]
    unit[norms == 0] = 0.0
    return (unit @ unit[np.asarray(targets, dtype=np.int64)].T).max(axis=1)


def select_alternatives(model: Recommender, pub: PublicParams, user: SyntheticUser, targets, s: int) -> np.ndarray:
    """Up to ``s`` non-target items scored above this user's median, most target-like first."""
    if s < 0:
        raise ValueError("s must be >= 0")
    targets = np.asarray(list(targets), dtype=np.int64)
    if s == 0 or targets.size == 0:
        return np.empty(0, dtype=np.int64)
    scores = model.all_logits(user.embedding, pub, user.graph)
    cand = np.flatnonzero(scores > np.median(scores))
    cand = np.setdiff1d(cand, targets)
    if cand.size == 0:
        return cand
    sim = cosine_to_targets(pub.item_emb, targets)[cand]
    order = np.lexsort((cand, -sim))
    return cand[order[:s]]


class Attack:
    """Base plugin. ``start`` is called once at the attack start epoch."""

    name = "none"
    target_rows_only = True

    def __init__(self, cfg: AttackConfig, model: Recommender, num_items: int, lr: float, local_epochs: int = 1,
                 batch_size: int = 0):
        self.cfg = cfg
        self.model = model
        self.num_items = num_items
        self.lr = lr
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.targets = np.asarray(cfg.targets, dtype=np.int64)

    def start(self, client_ids, rng_for):
        pass

    def client_update(self, client_id: int, pub: PublicParams, epoch: int, rng: np.random.Generator) -> GradientUpdate:
        raise NotImplementedError

    def round(self, client_ids, pub: PublicParams, epoch: int, rng_for):
        return [self.client_update(c, pub, epoch, rng_for(c)) for c in client_ids]

    # shared helpers -----------------------------------------------------
    def _poison_lr(self):
        return self.cfg.poison_lr if self.cfg.poison_lr is not None else self.lr

    def _poison_theta_lr(self):
        return self.cfg.poison_theta_lr if self.cfg.poison_theta_lr is not None else self.lr

    def synthetic_user(self, client_id, pub, rng, fit=True) -> SyntheticUser:
        pos, neg = synthetic_profile(self.num_items, self.cfg.alpha, rng, exclude=self.targets,
                                     neg_ratio=self.cfg.neg_ratio)
        if fit:
            emb = fit_user(self.model, pub, pos, neg, rng, steps=self.cfg.fit_steps, lr=self.cfg.fit_lr,
                           init_std=self.cfg.fit_init_std)
        else:
            emb = rng.normal(0.0, 1.0, size=pub.dim)
            pos = neg = np.empty(0, dtype=np.int64)
        return SyntheticUser(client_id, pos, neg, emb)

    def _descend(self, client_id, pub, loss_fn):
        """Plain gradient steps on the target rows and the MLP; upload ``(before - after) / lr``.

        Item rows and MLP weights use separate step sizes, so a large item
        step does not also inflate the MLP upload.
        """
        step, theta_step = self._poison_lr(), self._poison_theta_lr()
        work = pub.copy()
        targets = self.targets
        for _ in range(self.cfg.poison_steps):
            _, (ids, rows), g_theta = loss_fn(work)
            if ids.size:
                work.item_emb[ids] -= step * rows
            for k in work.theta:
                work.theta[k] = work.theta[k] - theta_step * g_theta[k]
        delta_rows = (pub.item_emb[targets] - work.item_emb[targets]) / self.lr
        delta_theta = {k: (pub.theta[k] - work.theta[k]) / self.lr for k in pub.theta}
        up = GradientUpdate(targets, delta_rows, delta_theta, client_id)
        up.check_finite()
        return up


class NoAttack(Attack):
    name = "none"

    def round(self, client_ids, pub, epoch, rng_for):
        return []


class PSMU(Attack):
    """Synthetic malicious users competing against top-K items and alternatives."""

    name = "psmu"
    use_alternatives = True
    fit_embedding = True

    def competitors(self, user: SyntheticUser, pub):
        k = min(self.cfg.top_k, self.num_items - user.positives.size)
        top = self.model.top_k(user.embedding, pub, user.graph, user.positives, k)
        comp = set(top.tolist())
        if self.use_alternatives:
            comp |= set(select_alternatives(self.model, pub, user, self.targets, self.cfg.num_alternatives).tolist())
        comp -= set(self.targets.tolist())
        return np.array(sorted(comp), dtype=np.int64)

    def client_update(self, client_id, pub, epoch, rng):
        user = self.synthetic_user(client_id, pub, rng, fit=self.fit_embedding)
        comp = self.competitors(user, pub)
        live_targets = np.setdiff1d(self.targets, user.positives)
        if comp.size == 0 or live_targets.size == 0:
            return GradientUpdate(self.targets, np.zeros((self.targets.size, pub.dim)),
                                  {k: np.zeros_like(v) for k, v in pub.theta.items()}, client_id)
        return self._descend(client_id, pub,
                             lambda work: attack_loss(self.model, user.embedding, work, user.graph, live_targets, comp))


class PSMUNoAP(PSMU):
    name = "psmu-no-ap"
    use_alternatives = False


class GaussianProxy(PSMU):
    """Proxy user embeddings drawn from N(0, I) instead of fitted ones."""

    name = "gaussian-proxy"
    use_alternatives = False
    fit_embedding = False


class ExplicitBoost(Attack):
    """Fit a synthetic user, then push the targets' predicted label toward 1."""

    name = "explicit-boost"

    def client_update(self, client_id, pub, epoch, rng):
        user = self.synthetic_user(client_id, pub, rng, fit=True)
        if self.targets.size == 0:
            return GradientUpdate.zeros(pub, client_id)
        labels = np.ones(self.targets.size)

        def loss_fn(work):
            loss, _, grad_v, grad_theta, _ = self.model.rec_loss_and_grads(
                user.embedding, work, user.graph, self.targets, labels)
            return loss, grad_v, grad_theta

        return self._descend(client_id, pub, loss_fn)


class RandomAttack(Attack):
    """Fake users with random interactions plus the targets, trained like benign clients."""

    name = "random"
    target_rows_only = False

    def __init__(self, *a, init_std: float = 0.1, **kw):
        super().__init__(*a, **kw)
        self.init_std = init_std
        self.clients: dict[int, ClientState] = {}

    def _spawn(self, client_id, dim, rng):
        # fixed fake profile for the whole attack, like an injected account
        pos, neg = synthetic_profile(self.num_items, self.cfg.alpha, rng, exclude=self.targets,
                                     neg_ratio=self.cfg.neg_ratio)
        pos = np.union1d(pos, self.targets)
        neg = np.setdiff1d(neg, pos)
        emb = rng.normal(0.0, self.init_std, size=dim)
        self.clients[client_id] = ClientState(client_id, emb, pos, neg, role="malicious")

    def round(self, client_ids, pub, epoch, rng_for):
        for c in client_ids:
            if c not in self.clients:
                self._spawn(c, pub.dim, np.random.default_rng(rng_for(c).integers(2**63)))
        return super().round(client_ids, pub, epoch, rng_for)

    def client_update(self, client_id, pub, epoch, rng):
        res = benign_local_step(self.model, self.clients[client_id], pub, self.local_epochs, self.lr, rng,
                                batch_size=self.batch_size)
        return res.update


REGISTRY = {cls.name: cls for cls in (NoAttack, PSMU, PSMUNoAP, GaussianProxy, ExplicitBoost, RandomAttack)}


def make_attack(name: str, cfg: AttackConfig, model: Recommender, num_items: int, lr: float, **kw) -> Attack:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; expected one of {ATTACKS}") from None
    return cls(cfg, model, num_items, lr, **kw)


def psmu_round(cfg: AttackConfig, model: Recommender, pub: PublicParams, epoch: int, client_ids, rng_for,
               lr: float, use_alternatives: bool = True):
    """One round of uploads, one per malicious client id."""
    if epoch < cfg.start_epoch:
        raise ValueError(f"epoch {epoch} precedes attack start {cfg.start_epoch}")
    cls = PSMU if use_alternatives else PSMUNoAP
    return cls(cfg, model, pub.num_items, lr).round(client_ids, pub, epoch, rng_for)
