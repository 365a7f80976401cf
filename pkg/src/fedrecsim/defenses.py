"""Server-side defenses applied to a round's uploads before the summing step.

Defenses only ever see :class:`GradientUpdate` objects, never client state or
role flags. Every rule returns an :class:`AggregatedGradient` that the server
applies as ``params -= lr * gradient``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .updates import AggregatedGradient, GradientUpdate, sum_updates

DEFENSES = ("none", "l2-clip", "l2-clip-su", "hics", "item-krum", "median", "trimmed-mean")


class DefenseError(ValueError):
    pass


@dataclass
class DefenseConfig:
    clip: float = 1.0
    sparsity: float = 0.1
    norm_ord: int = 2
    per_row_clip: bool = False
    adaptive_clip: bool = True
    trim: int = 1
    contributors_only: bool = False

    def __post_init__(self):
        if not self.clip > 0:
            raise DefenseError(f"clip bound must be > 0, got {self.clip}")
        if not 0 < self.sparsity <= 1:
            raise DefenseError(f"sparsity fraction must be in (0, 1], got {self.sparsity}")
        if self.norm_ord != 2:
            raise DefenseError("only the l2 norm is supported")
        if self.trim < 0:
            raise DefenseError("trim must be >= 0")


def _clip_factor(norm: float, bound: float) -> float:
    if norm <= bound or norm == 0.0:
        return 1.0
    return bound / norm


def clip_per_client(update: GradientUpdate, rho: float, per_row: bool = False) -> GradientUpdate:
    """Scale the client's item rows so their joint l2 norm is at most ``rho``.

    MLP gradients pass through untouched. With ``per_row`` each row is
    clipped on its own instead.
    """
    if not rho > 0:
        raise DefenseError("rho must be > 0")
    theta = {k: v.copy() for k, v in update.theta.items()}
    if per_row:
        norms = np.linalg.norm(update.item_grads, axis=1)
        factors = np.array([_clip_factor(n, rho) for n in norms])
        rows = update.item_grads * factors[:, None]
    else:
        rows = update.item_grads * _clip_factor(update.item_norm(), rho)
    return GradientUpdate(update.item_ids.copy(), rows, theta, update.uploader)


@dataclass
class MemoryBank:
    W: np.ndarray

    @classmethod
    def zeros(cls, num_items: int, dim: int) -> "MemoryBank":
        return cls(np.zeros((num_items, dim)))

    def mass(self) -> float:
        return float(np.linalg.norm(self.W))


@dataclass
class HiCSResult:
    released: np.ndarray            # (|V|, d) after the adaptive clip
    released_raw: np.ndarray        # (|V|, d) before the adaptive clip
    selected: np.ndarray            # released row ids
    bank: MemoryBank                # bank after extraction
    clipped_sum: np.ndarray         # sum of this round's clipped rows
    theta: dict[str, np.ndarray]
    n_clipped: int = 0
    mean_selected_norm: float = 0.0


def top_rows(W: np.ndarray, n: int) -> np.ndarray:
    """Ids of the ``n`` rows with the largest l2 norm, ties by smaller id."""
    norms = np.linalg.norm(W, axis=1)
    order = np.lexsort((np.arange(W.shape[0]), -norms))
    return np.sort(order[:n])


def hics_round(updates, bank: MemoryBank, cfg: DefenseConfig, theta_like=None) -> HiCSResult:
    """Clip per client, accumulate into the bank, release the top rows, re-clip them.

    ``ceil(sparsity * |V|)`` rows are released each round. With
    ``cfg.adaptive_clip`` every released row is clipped to the mean l2 norm
    of the released rows.
    """
    num_items, dim = bank.W.shape
    updates = list(updates)
    clipped = [clip_per_client(u, cfg.clip, cfg.per_row_clip) for u in updates]
    n_clipped = sum(1 for u in updates if u.item_norm() > cfg.clip)
    if theta_like is None:
        theta_like = updates[0].theta if updates else {}
    summed = sum_updates(clipped, num_items, dim, theta_like)
    W = bank.W + summed.items
    n_release = min(num_items, math.ceil(cfg.sparsity * num_items))
    sel = top_rows(W, n_release)
    released_raw = np.zeros_like(W)
    released_raw[sel] = W[sel]
    W_next = W - released_raw
    released = released_raw.copy()
    mean_norm = 0.0
    if sel.size:
        norms = np.linalg.norm(W[sel], axis=1)
        mean_norm = float(norms.mean())
        if cfg.adaptive_clip:
            factors = np.array([_clip_factor(n, mean_norm) for n in norms])
            released[sel] = W[sel] * factors[:, None]
    return HiCSResult(released, released_raw, sel, MemoryBank(W_next), summed.items, summed.theta,
                      n_clipped, mean_norm)


def item_krum(updates, num_items: int, dim: int, scale: bool = False) -> np.ndarray:
    """Per item, the contributor row closest to the mean of the other contributors' rows.

    With ``scale`` the chosen row is multiplied by the item's contributor count.
    Ties go to the smallest uploader id.
    """
    out = np.zeros((num_items, dim))
    by_item: dict[int, list[np.ndarray]] = {}
    for up in sorted(updates, key=lambda u: u.uploader):
        for i, row in zip(up.item_ids.tolist(), up.item_grads):
            by_item.setdefault(i, []).append(row)
    for i, rows in by_item.items():
        out[i] = krum_select(np.stack(rows)) * (len(rows) if scale else 1)
    return out


def krum_select(rows: np.ndarray) -> np.ndarray:
    """Row minimizing distance to the mean of all other rows; first index wins ties."""
    n = rows.shape[0]
    if n == 1:
        return rows[0].copy()
    # leave-one-out means summed directly: ``total - row`` would let rounding
    # decide ties such as the symmetric two-row case
    others_mean = np.stack([np.delete(rows, i, axis=0).sum(axis=0) for i in range(n)]) / (n - 1)
    dist = np.linalg.norm(rows - others_mean, axis=1)
    return rows[int(np.argmin(dist))].copy()


def _stack_dense(updates, num_items: int, dim: int) -> np.ndarray:
    stack = np.zeros((len(updates), num_items, dim))
    for c, up in enumerate(updates):
        stack[c, up.item_ids] = up.item_grads
    return stack


def coordinate_median(values: np.ndarray) -> np.ndarray:
    """Median over axis 0 (mean of the two middle values for even counts)."""
    return np.median(values, axis=0)


def trimmed_mean(values: np.ndarray, trim: int) -> np.ndarray:
    """Mean over axis 0 after dropping the ``trim`` largest and ``trim`` smallest values."""
    n = values.shape[0]
    if 2 * trim >= n:
        raise DefenseError(f"trimmed mean needs more than {2 * trim} clients, got {n}")
    s = np.sort(values, axis=0)
    return s[trim:n - trim].mean(axis=0)


def _rowwise_contributors(updates, num_items, dim, rule):
    out = np.zeros((num_items, dim))
    by_item: dict[int, list[np.ndarray]] = {}
    for up in updates:
        for i, row in zip(up.item_ids.tolist(), up.item_grads):
            by_item.setdefault(i, []).append(row)
    for i, rows in by_item.items():
        out[i] = rule(np.stack(rows)) * len(rows)
    return out


class Defense:
    """Stateful defense plugin; ``stats`` holds the latest round's diagnostics."""

    name = "none"

    def __init__(self, cfg: DefenseConfig, num_items: int, dim: int):
        self.cfg = cfg
        self.num_items = num_items
        self.dim = dim
        self.stats: dict[str, float] = {}

    def __call__(self, updates, theta_like) -> AggregatedGradient:
        updates = list(updates)
        self.stats = {}
        return self.apply(updates, theta_like)

    def apply(self, updates, theta_like) -> AggregatedGradient:
        return sum_updates(updates, self.num_items, self.dim, theta_like)


class L2Clip(Defense):
    name = "l2-clip"

    def apply(self, updates, theta_like):
        clipped = [clip_per_client(u, self.cfg.clip, self.cfg.per_row_clip) for u in updates]
        self.stats = {"clipped": sum(1 for u in updates if u.item_norm() > self.cfg.clip)}
        return sum_updates(clipped, self.num_items, self.dim, theta_like)


class HiCS(Defense):
    name = "hics"

    def __init__(self, cfg, num_items, dim):
        super().__init__(cfg, num_items, dim)
        self.bank = MemoryBank.zeros(num_items, dim)
        self.last: HiCSResult | None = None

    def apply(self, updates, theta_like):
        res = hics_round(updates, self.bank, self.cfg, theta_like)
        self.bank = res.bank
        self.last = res
        self.stats = {"clipped": res.n_clipped, "bank_mass": res.bank.mass(),
                      "released_mass": float(np.linalg.norm(res.released))}
        return AggregatedGradient(res.released, res.theta)


class L2ClipSU(HiCS):
    """Clipping plus sparsified updating, without the adaptive re-clip."""

    name = "l2-clip-su"

    def __init__(self, cfg, num_items, dim):
        super().__init__(replace(cfg, adaptive_clip=False), num_items, dim)


class ItemKrum(Defense):
    name = "item-krum"

    def apply(self, updates, theta_like):
        updates = sorted(updates, key=lambda u: u.uploader)
        items = item_krum(updates, self.num_items, self.dim, scale=True)
        theta = _dense_theta(updates, theta_like, lambda vals: krum_select(vals.reshape(vals.shape[0], -1)))
        return AggregatedGradient(items, theta)


class CoordinateMedian(Defense):
    name = "median"

    def rule(self, values):
        return coordinate_median(values)

    def apply(self, updates, theta_like):
        n = len(updates)
        if self.cfg.contributors_only:
            items = _rowwise_contributors(updates, self.num_items, self.dim, self.rule)
        else:
            items = self.rule(_stack_dense(updates, self.num_items, self.dim)) * n
        theta = _dense_theta(updates, theta_like, self.rule)
        return AggregatedGradient(items, theta)


class TrimmedMean(CoordinateMedian):
    name = "trimmed-mean"

    def rule(self, values):
        return trimmed_mean(values, self.cfg.trim)


def _dense_theta(updates, theta_like, rule):
    n = len(updates)
    out = {}
    for k, v in theta_like.items():
        vals = np.stack([u.theta[k] for u in updates])
        out[k] = np.asarray(rule(vals)).reshape(v.shape) * n
    return out


REGISTRY = {cls.name: cls for cls in (Defense, L2Clip, L2ClipSU, HiCS, ItemKrum, CoordinateMedian, TrimmedMean)}


def make_defense(name: str, cfg: DefenseConfig, num_items: int, dim: int) -> Defense:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise DefenseError(f"unknown defense {name!r}; expected one of {DEFENSES}") from None
    return cls(cfg, num_items, dim)


def defense_dispatch(name: str, updates, state: Defense | None, cfg: DefenseConfig, num_items: int, dim: int,
                     theta_like) -> tuple[AggregatedGradient, Defense]:
    """Route ``updates`` through the named rule, creating its state on first use."""
    if state is None or state.name != name:
        state = make_defense(name, cfg, num_items, dim)
    return state(updates, theta_like), state
