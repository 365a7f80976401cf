"""Dense parameter containers, Adam, and a central-difference gradient checker.

Parameters are plain float64 numpy arrays held in a :class:`ParamSet`, one
:class:`AdamState` per array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    """A gradient or update does not match the parameter it targets."""


class NumericError(ArithmeticError):
    """A loss or gradient evaluated to a non-finite value."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)

    def update(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return the new parameter value; advances the moments in place."""
        self.step += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ParamSet:
    """Named float64 arrays, each with its own Adam state."""

    params: dict[str, np.ndarray]
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(p)
            elif self.states[name].m.shape != p.shape:
                raise ShapeError(f"optimizer state for {name!r} has shape {self.states[name].m.shape}, "
                                 f"parameter has {p.shape}")
        extra = set(self.states) - set(self.params)
        if extra:
            raise ShapeError(f"optimizer state without parameter: {sorted(extra)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.params.items()},
                        {k: s.copy() for k, s in self.states.items()})

    def fresh_copy(self) -> "ParamSet":
        """Copy of the values with zeroed optimizer state."""
        return ParamSet({k: v.copy() for k, v in self.params.items()})

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def check_shapes(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(
                f"parameter {name!r}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """Apply one bias-corrected Adam update in place and return ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient, so
    every tracked step counter advances by one.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    check_shapes(params.params, grads)
    for name, p in params.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        params.params[name] = params.states[name].update(p, np.asarray(g, dtype=np.float64), lr)
    return params


def finite_diff_check(f: Callable[[Mapping[str, np.ndarray]], float],
                      params: Mapping[str, np.ndarray],
                      analytic: Mapping[str, np.ndarray],
                      h: float = 1e-4) -> float:
    """Max over coordinates of ``|central difference - analytic| / max(1, |analytic|)``.

    ``f`` receives a dict of arrays. Parameters absent from ``analytic`` are
    expected to have zero gradient and are checked as such.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if isinstance(params, ParamSet):
        params = params.params
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    check_shapes(work, analytic)
    worst = 0.0
    for name, arr in work.items():
        ana = np.asarray(analytic.get(name, np.zeros_like(arr)), dtype=np.float64)
        flat = arr.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * h)
            err = abs(num - ana_flat[i]) / max(1.0, abs(ana_flat[i]))
            worst = max(worst, err)
    return worst
