"""The federated training loop: sample, train locally, defend, aggregate, evaluate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import Attack, AttackConfig, make_attack
from .clients import ClientState, benign_local_step
from .config import RunConfig
from .data import InteractionDataset
from .defenses import Defense, DefenseConfig, make_defense
from .metrics import EvalUsers, exposure_ratio, hit_ratio, top_k_lists
from .models import PublicParams, Recommender, init_public
from .updates import apply_gradient

log = logging.getLogger(__name__)

# RNG stream tags; every stream is keyed by (master seed, tag, epoch, client)
_INIT, _CLIENT_INIT, _SAMPLE, _LOCAL = 1, 2, 3, 4


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


def stream(seed: int, tag: int, epoch: int = 0, client: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch, client]))


@dataclass
class RoundReport:
    epoch: int
    participants: list[int]
    er: dict[int, float | None]
    er_mean: float | None
    hr: float
    loss: float
    defense: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "participants": self.participants,
                "er": {str(k): v for k, v in self.er.items()}, "er_mean": self.er_mean,
                "hr": self.hr, "loss": self.loss, "defense": dict(self.defense)}


@dataclass
class Simulation:
    """Everything a run needs, built from a config and a dataset."""

    cfg: RunConfig
    data: InteractionDataset
    model: Recommender
    pub: PublicParams
    clients: list[ClientState]
    malicious: list[int]
    targets: list[int]
    attack: Attack
    defense: Defense

    def eval_users(self) -> EvalUsers:
        return EvalUsers(np.stack([c.embedding for c in self.clients]), [c.graph for c in self.clients],
                         [c.positives for c in self.clients], list(self.data.test))


def resolve_targets(cfg: RunConfig, data: InteractionDataset) -> list[int]:
    if cfg.attack.targets:
        bad = [t for t in cfg.attack.targets if t >= data.num_items]
        if bad:
            raise ValueError(f"attack.targets out of range: {bad}")
        return sorted(int(t) for t in cfg.attack.targets)
    return sorted(data.least_popular(cfg.attack.num_targets))


def build_simulation(cfg: RunConfig, data: InteractionDataset, attack: Attack | None = None,
                     defense: Defense | None = None) -> Simulation:
    model = Recommender(cfg.model.name, cfg.model.head)
    pub = init_public(data.num_items, cfg.model.dim, cfg.model.layers, stream(cfg.seed, _INIT), cfg.model.init_std)
    clients = []
    for u in range(data.num_users):
        emb = stream(cfg.seed, _CLIENT_INIT, 0, u).normal(0.0, cfg.model.init_std, size=cfg.model.dim)
        clients.append(ClientState(u, emb, data.train_pos[u], data.train_neg[u]))
    targets = resolve_targets(cfg, data)
    n_mal = cfg.malicious_count(data.num_users)
    malicious = list(range(data.num_users, data.num_users + n_mal))
    if attack is None:
        a = cfg.attack
        acfg = AttackConfig(targets=tuple(targets), alpha=a.alpha, num_alternatives=a.num_alternatives,
                            start_epoch=a.start, top_k=a.top_k, fit_steps=a.fit_steps, fit_lr=a.fit_lr,
                            fit_init_std=a.fit_init_std, poison_steps=a.poison_steps,
                            poison_lr=a.poison_lr or None,
                            poison_theta_lr=a.poison_theta_lr or None, neg_ratio=cfg.dataset.neg_ratio)
        attack = make_attack(a.name, acfg, model, data.num_items, cfg.train.lr,
                             local_epochs=cfg.train.local_epochs, batch_size=cfg.train.batch_size)
    if defense is None:
        d = cfg.defense
        dcfg = DefenseConfig(clip=d.clip, sparsity=d.sparsity, per_row_clip=d.per_row_clip,
                             adaptive_clip=d.adaptive_clip, trim=d.trim, contributors_only=d.contributors_only)
        defense = make_defense(d.name, dcfg, data.num_items, cfg.model.dim)
    return Simulation(cfg, data, model, pub, clients, malicious, targets, attack, defense)


def evaluate(sim: Simulation, epoch: int, participants, loss: float, defense_stats=None) -> RoundReport:
    users = sim.eval_users()
    k = max(sim.cfg.metrics.er_k, sim.cfg.metrics.hr_k)
    lists = top_k_lists(sim.model, users, sim.pub, k)
    er, er_mean = exposure_ratio(sim.model, users, sim.pub, sim.targets, sim.cfg.metrics.er_k, lists=lists)
    hr = hit_ratio(sim.model, users, sim.pub, sim.cfg.metrics.hr_k, lists=lists)
    return RoundReport(epoch, list(participants), er, er_mean, hr, loss, dict(defense_stats or {}))


def sample_clients(pool: list[int], fraction: float, rng: np.random.Generator) -> list[int]:
    if fraction >= 1.0:
        return sorted(pool)
    n = max(1, math.ceil(fraction * len(pool)))
    return sorted(int(c) for c in rng.choice(pool, size=n, replace=False))


def run_round(sim: Simulation, epoch: int, pool: list[int], executor=None):
    """One global epoch. Returns ``(participants, mean benign loss)``."""
    cfg = sim.cfg
    seed = cfg.seed
    chosen = sample_clients(pool, cfg.train.client_fraction, stream(seed, _SAMPLE, epoch))
    n_benign = len(sim.clients)
    benign = [c for c in chosen if c < n_benign]
    bad = [c for c in chosen if c >= n_benign]

    def local(cid):
        return benign_local_step(sim.model, sim.clients[cid], sim.pub, cfg.train.local_epochs, cfg.train.lr,
                                 stream(seed, _LOCAL, epoch, cid), batch_size=cfg.train.batch_size)

    try:
        if executor is not None:
            results = list(executor.map(local, benign))
        else:
            results = [local(c) for c in benign]
        rng_for = lambda cid: stream(seed, _LOCAL, epoch, cid)  # noqa: E731
        poisoned = sim.attack.round(bad, sim.pub, epoch, rng_for) if bad else []
    except ArithmeticError as exc:
        raise TrainingError(epoch, str(exc)) from exc
    except Exception as exc:
        raise TrainingError(epoch, f"client failure: {exc}") from exc
    # fixed client-id order for the sums
    updates = sorted([r.update for r in results] + list(poisoned), key=lambda u: u.uploader)
    try:
        grad = sim.defense(updates, sim.pub.theta) if updates else None
    except Exception as exc:
        raise TrainingError(epoch, f"defense {sim.defense.name!r} failed: {exc}") from exc
    if grad is not None:
        sim.pub = apply_gradient(sim.pub, grad, cfg.train.lr)
    n = sum(r.n_samples for r in results)
    loss = sum(r.loss * r.n_samples for r in results) / n if n else 0.0
    return chosen, loss


def run_training(cfg: RunConfig, data: InteractionDataset, attack: Attack | None = None,
                 defense: Defense | None = None, on_round=None, sim: Simulation | None = None) -> list[RoundReport]:
    """Train for ``cfg.train.epochs`` rounds; epoch 0 reports the untrained model.

    Malicious clients join the pool at ``cfg.attack.start``. Metrics are
    computed over benign users after every round. ``on_round(sim, report)``
    is called after each evaluation.
    """
    if sim is None:
        sim = build_simulation(cfg, data, attack, defense)
    benign_ids = list(range(len(sim.clients)))
    reports = [evaluate(sim, 0, [], 0.0)]
    if on_round:
        on_round(sim, reports[0])
    executor = ThreadPoolExecutor(cfg.train.workers) if cfg.train.workers > 1 else None
    try:
        for epoch in range(1, cfg.train.epochs + 1):
            attacking = bool(sim.malicious) and epoch >= cfg.attack.start
            if attacking and epoch == cfg.attack.start:
                sim.attack.start(sim.malicious, lambda cid: stream(cfg.seed, _LOCAL, epoch, cid))
            pool = benign_ids + (sim.malicious if attacking else [])
            chosen, loss = run_round(sim, epoch, pool, executor)
            report = evaluate(sim, epoch, chosen, loss, sim.defense.stats)
            log.info("epoch %d  er@%d=%s  hr@%d=%.4f  loss=%.4f", epoch, cfg.metrics.er_k, report.er_mean,
                     cfg.metrics.hr_k, report.hr, loss)
            reports.append(report)
            if on_round:
                on_round(sim, report)
    finally:
        if executor is not None:
            executor.shutdown()
    return reports
