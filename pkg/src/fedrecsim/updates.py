"""Client uploads and the plain summing server step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import NumericError, ShapeError
from .models import PublicParams


@dataclass
class GradientUpdate:
    """One client's upload: sparse item-embedding rows plus dense MLP gradients.

    ``item_ids`` is sorted and unique; ``item_grads[k]`` belongs to
    ``item_ids[k]``.
    """

    item_ids: np.ndarray
    item_grads: np.ndarray
    theta: dict[str, np.ndarray]
    uploader: int = -1

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.item_grads = np.asarray(self.item_grads, dtype=np.float64)
        if self.item_grads.ndim != 2 or self.item_grads.shape[0] != self.item_ids.size:
            raise ShapeError(f"item_grads shape {self.item_grads.shape} does not match {self.item_ids.size} ids")
        if self.item_ids.size > 1 and np.any(np.diff(self.item_ids) <= 0):
            order = np.argsort(self.item_ids, kind="stable")
            if np.any(np.diff(self.item_ids[order]) == 0):
                raise ShapeError("duplicate item ids in update")
            self.item_ids = self.item_ids[order]
            self.item_grads = self.item_grads[order]

    @classmethod
    def zeros(cls, pub: PublicParams, uploader: int = -1) -> "GradientUpdate":
        return cls(np.empty(0, dtype=np.int64), np.zeros((0, pub.dim)),
                   {k: np.zeros_like(v) for k, v in pub.theta.items()}, uploader)

    @classmethod
    def from_dense(cls, grad_v: np.ndarray, theta, uploader: int = -1) -> "GradientUpdate":
        ids = np.flatnonzero(np.any(grad_v != 0, axis=1))
        return cls(ids, grad_v[ids], theta, uploader)

    def dense_items(self, num_items: int, dim: int) -> np.ndarray:
        out = np.zeros((num_items, dim))
        out[self.item_ids] = self.item_grads
        return out

    def item_norm(self) -> float:
        return float(np.linalg.norm(self.item_grads))

    def scaled(self, factor: float, items_only: bool = False) -> "GradientUpdate":
        theta = self.theta if items_only else {k: v * factor for k, v in self.theta.items()}
        return GradientUpdate(self.item_ids.copy(), self.item_grads * factor,
                              {k: v.copy() for k, v in theta.items()}, self.uploader)

    def check_finite(self):
        if not np.all(np.isfinite(self.item_grads)) or not all(np.all(np.isfinite(v)) for v in self.theta.values()):
            raise NumericError(f"non-finite gradient from client {self.uploader}")


@dataclass
class AggregatedGradient:
    """Server-side gradient ready for the plain summing step."""

    items: np.ndarray
    theta: dict[str, np.ndarray]


def sum_updates(updates, num_items: int, dim: int, theta_like) -> AggregatedGradient:
    """Sum uploads in the given order; absent rows contribute zero."""
    items = np.zeros((num_items, dim))
    theta = {k: np.zeros_like(v) for k, v in theta_like.items()}
    for up in updates:
        if up.item_ids.size:
            if up.item_ids.max() >= num_items or up.item_grads.shape[1] != dim:
                raise ShapeError(f"update from client {up.uploader} does not match item table {num_items}x{dim}")
            items[up.item_ids] += up.item_grads
        for k, v in up.theta.items():
            if k not in theta or v.shape != theta[k].shape:
                raise ShapeError(f"update from client {up.uploader}: bad gradient for {k!r}")
            theta[k] += v
    return AggregatedGradient(items, theta)


def apply_gradient(pub: PublicParams, grad: AggregatedGradient, lr: float) -> PublicParams:
    if grad.items.shape != pub.item_emb.shape:
        raise ShapeError(f"item gradient shape {grad.items.shape} != table {pub.item_emb.shape}")
    theta = {}
    for k, v in pub.theta.items():
        g = grad.theta.get(k)
        if g is None:
            theta[k] = v.copy()
            continue
        if g.shape != v.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {v.shape}")
        theta[k] = v - lr * g
    return PublicParams(pub.item_emb - lr * grad.items, theta)


def aggregate(pub: PublicParams, updates, lr: float) -> PublicParams:
    """``V -= lr * sum(rows)``, ``theta -= lr * sum(grads)``."""
    updates = list(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    return apply_gradient(pub, sum_updates(updates, pub.num_items, pub.dim, pub.theta), lr)
