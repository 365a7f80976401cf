"""Self-checks for hand-derived gradients and defense invariants.

Used by the ``check`` CLI command and the test suite. Every check returns
a :class:`CheckResult` with the measured value and its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import attack_loss
from .defenses import DefenseConfig, MemoryBank, clip_per_client, hics_round
from .kernel import finite_diff_check
from .models import LocalGraph, PublicParams, Recommender, init_public
from .updates import GradientUpdate, sum_updates

FD_TOL = 1e-4
FD_STEP = 1e-4
# reject toy instances with a ReLU pre-activation this close to zero:
# a central difference straddling the kink measures the wrong slope
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    ok: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (tol {self.tol:g}) {self.detail}".rstrip()


@dataclass
class ToyInstance:
    model: Recommender
    pub: PublicParams
    u: np.ndarray
    graph: LocalGraph
    items: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    competitors: np.ndarray


def _min_preactivation(model: Recommender, inst_u, pub: PublicParams, graph, items) -> float:
    fw = model._forward(inst_u, pub, graph, items)
    if fw.acts is None:
        return np.inf
    h = fw.acts[0]
    n_layers = len(pub.theta) // 2
    worst = np.inf
    for i in range(n_layers - 1):
        h = h @ pub.theta[f"W{i}"] + pub.theta[f"b{i}"]
        worst = min(worst, float(np.abs(h).min()))
        h = np.maximum(h, 0.0)
    return worst


def toy_instance(kind: str, rng: np.random.Generator, num_items: int = 12, dim: int = 4) -> ToyInstance:
    """A small random model and batch, away from ReLU kinks."""
    model = Recommender(kind)
    while True:
        pub = init_public(num_items, dim, [2 * dim, 6, 3], rng, init_std=0.5)
        for k in pub.theta:
            if k.startswith("b"):
                pub.theta[k] = rng.normal(0.0, 0.3, size=pub.theta[k].shape)
        u = rng.normal(0.0, 0.5, size=dim)
        perm = rng.permutation(num_items)
        pos, neg = perm[:3], perm[3:7]
        graph = LocalGraph.of(pos)
        items = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
        targets = perm[7:9]
        competitors = perm[9:12]
        every = np.concatenate([items, targets, competitors])
        if _min_preactivation(model, u, pub, graph, every) > KINK_MARGIN:
            return ToyInstance(model, pub, u, graph, items, labels, targets, competitors)


def _pack(u, pub: PublicParams) -> dict:
    return {"u": u.copy(), "V": pub.item_emb.copy(), **{k: v.copy() for k, v in pub.theta.items()}}


def _unpack(params: dict) -> tuple[np.ndarray, PublicParams]:
    theta = {k: v for k, v in params.items() if k not in ("u", "V")}
    return params["u"], PublicParams(params["V"], theta)


def rec_loss_fd_error(inst: ToyInstance, h: float = FD_STEP) -> float:
    """Max relative error of the analytic rec-loss gradient w.r.t. ``u``, ``V`` and the MLP."""
    m = inst.model
    _, g_u, (ids, rows), g_theta, n_clamped = m.rec_loss_and_grads(inst.u, inst.pub, inst.graph, inst.items,
                                                                    inst.labels)
    if n_clamped:
        raise ValueError("toy instance hit the probability clamp")
    g_v = np.zeros_like(inst.pub.item_emb)
    g_v[ids] = rows
    analytic = {"u": g_u, "V": g_v, **g_theta}

    def f(params):
        u, pub = _unpack(params)
        return m.rec_loss_and_grads(u, pub, inst.graph, inst.items, inst.labels)[0]

    return finite_diff_check(f, _pack(inst.u, inst.pub), analytic, h)


def attack_loss_fd_error(inst: ToyInstance, h: float = FD_STEP) -> float:
    """Max relative error of the attack-loss gradient w.r.t. ``V`` and the MLP (``u`` frozen)."""
    m = inst.model
    _, (ids, rows), g_theta = attack_loss(m, inst.u, inst.pub, inst.graph, inst.targets, inst.competitors)
    g_v = np.zeros_like(inst.pub.item_emb)
    g_v[ids] = rows
    params = {"V": inst.pub.item_emb.copy(), **{k: v.copy() for k, v in inst.pub.theta.items()}}

    def f(p):
        pub = PublicParams(p["V"], {k: v for k, v in p.items() if k != "V"})
        return attack_loss(m, inst.u, pub, inst.graph, inst.targets, inst.competitors)[0]

    return finite_diff_check(f, params, {"V": g_v, **g_theta}, h)


def gradient_checks(n_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for kind in ("ncf", "lightgcn"):
        rec, att = [], []
        for _ in range(n_instances):
            inst = toy_instance(kind, rng)
            rec.append(rec_loss_fd_error(inst))
            att.append(attack_loss_fd_error(inst))
        for label, errs in (("rec-loss", rec), ("attack-loss", att)):
            worst = max(errs)
            out.append(CheckResult(f"{kind} {label} gradient", worst, FD_TOL, worst < FD_TOL,
                                   f"over {n_instances} instances"))
    return out


def random_update(rng: np.random.Generator, num_items: int, dim: int, uploader: int, scale: float = 1.0,
                  theta_like=None) -> GradientUpdate:
    k = int(rng.integers(1, num_items + 1))
    ids = np.sort(rng.choice(num_items, size=k, replace=False))
    rows = rng.normal(0.0, scale, size=(k, dim)) * rng.exponential(1.0, size=(k, 1))
    theta = {name: rng.normal(size=v.shape) for name, v in (theta_like or {}).items()}
    return GradientUpdate(ids, rows, theta, uploader)


def clip_mass_check(n_sets: int = 100, seed: int = 0, num_items: int = 30, dim: int = 4) -> CheckResult:
    """The clipped sum of ``m`` uploads has l2 mass at most ``rho * m``."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n_sets):
        m = int(rng.integers(1, 21))
        rho = float(rng.uniform(0.1, 5.0))
        ups = [random_update(rng, num_items, dim, c, scale=float(rng.uniform(0.01, 10))) for c in range(m)]
        clipped = [clip_per_client(u, rho) for u in ups]
        mass = np.linalg.norm(sum_updates(clipped, num_items, dim, {}).items)
        worst = max(worst, mass - rho * m)
    return CheckResult("clip mass bound (slack)", worst, 1e-9, worst <= 1e-9, f"over {n_sets} upload sets")


def hics_bookkeeping_check(rounds: int = 30, seed: int = 0, num_items: int = 40, dim: int = 4,
                           clients: int = 12) -> list[CheckResult]:
    """Bank conservation and the adaptive post-clip bound across consecutive rounds."""
    rng = np.random.default_rng(seed)
    cfg = DefenseConfig(clip=1.0, sparsity=0.1)
    bank = MemoryBank.zeros(num_items, dim)
    cons = bound = 0.0
    for _ in range(rounds):
        ups = [random_update(rng, num_items, dim, c, scale=float(rng.uniform(0.01, 3))) for c in range(clients)]
        before = bank.W.copy()
        res = hics_round(ups, bank, cfg, {})
        cons = max(cons, float(np.abs(before + res.clipped_sum - res.released_raw - res.bank.W).max()))
        norms = np.linalg.norm(res.released[res.selected], axis=1)
        bound = max(bound, float((norms - res.mean_selected_norm).max()))
        bank = res.bank
    return [CheckResult("hics bank conservation", cons, 1e-12, cons <= 1e-12, f"over {rounds} rounds"),
            CheckResult("hics adaptive clip bound (slack)", bound, 1e-9, bound <= 1e-9, f"over {rounds} rounds")]


def run_all(seed: int = 0) -> list[CheckResult]:
    return gradient_checks(seed=seed) + [clip_mass_check(seed=seed)] + hics_bookkeeping_check(seed=seed)
