"""Regression, autoencoder, mapping, consistency and distance losses.

Weights are bound by name: ``alpha`` scales the autoencoder term, ``beta``
the mapping term, ``gamma`` the consistency term and ``delta`` the
distance term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import DimensionError, Value

CONS_MODES = ("paired", "algorithm-literal")
DIST_MODES = ("vector", "scalar")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            w = getattr(self, name)
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"loss weight {name}={w} must be finite and >= 0")


@dataclass
class LossBundle:
    reg: Value
    auto: Value
    map: Value
    cons: Value
    dist: Value
    total: Value

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("reg", "auto", "map", "cons", "dist", "total")}


def _same(a: Value, b: Value, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_reg(y: Value, y_hat: Value) -> Value:
    _same(y, y_hat, "loss_reg")
    return ad.mse(y_hat, y)


def loss_auto(z: Value, z_hat: Value) -> Value:
    """MSE between a latent and its transfer/inverse-transfer round trip."""
    _same(z, z_hat, "loss_auto")
    return ad.mse(z_hat, z)


def loss_map(y: Value, y_cross: Value) -> Value:
    """MSE between labels and the prediction decoded from the other task's transfer space."""
    _same(y, y_cross, "loss_map")
    return ad.mse(y_cross, y)


def _check_sets(a: Sequence[Value], b: Sequence[Value]) -> None:
    if len(a) != len(b):
        raise DimensionError(f"perturbation counts differ: {len(a)} vs {len(b)}")
    if not a:
        raise DimensionError("at least one perturbation is required")


def _mean(terms: list[Value]) -> Value:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 1.0 / len(terms))


def loss_cons(m_t: Value, m_s: Value, mbar_t: Sequence[Value], mbar_s: Sequence[Value],
              mode: str = "paired") -> Value:
    """Consistency between the two tasks' transfer spaces.

    ``paired``: pivots agree and each perturbation agrees with its counterpart.
    ``algorithm-literal``: each target perturbation agrees with the source pivot.
    """
    _check_sets(mbar_t, mbar_s)
    _same(m_t, m_s, "loss_cons")
    if mode == "paired":
        return ad.add(ad.mse(m_t, m_s), _mean([ad.mse(a, b) for a, b in zip(mbar_t, mbar_s)]))
    if mode == "algorithm-literal":
        return _mean([ad.mse(a, m_s) for a in mbar_t])
    raise ValueError(f"unknown consistency mode {mode!r}; expected one of {CONS_MODES}")


def loss_dist(m_t: Value, mbar_t: Sequence[Value], m_s: Value, mbar_s: Sequence[Value],
              mode: str = "vector") -> Value:
    """Match pivot-to-perturbation displacements across tasks.

    ``vector`` compares displacement vectors, ``scalar`` their Euclidean
    lengths (row-wise), both averaged over perturbations.
    """
    _check_sets(mbar_t, mbar_s)
    _same(m_t, m_s, "loss_dist")
    terms = []
    for a, b in zip(mbar_t, mbar_s):
        d_t = ad.sub(m_t, a)
        d_s = ad.sub(m_s, b)
        if mode == "vector":
            terms.append(ad.mse(d_t, d_s))
        elif mode == "scalar":
            if d_t.data.ndim == 1:
                d_t, d_s = ad.reshape(d_t, (1, -1)), ad.reshape(d_s, (1, -1))
            terms.append(ad.mse(ad.row_norms(d_t), ad.row_norms(d_s)))
        else:
            raise ValueError(f"unknown distance mode {mode!r}; expected one of {DIST_MODES}")
    return _mean(terms)


def loss_total(reg: Value, auto: Value, map_: Value, cons: Value, dist: Value,
               w: LossWeights = LossWeights()) -> LossBundle:
    total = ad.add(reg, ad.scale(auto, w.alpha))
    total = ad.add(total, ad.scale(map_, w.beta))
    total = ad.add(total, ad.scale(cons, w.gamma))
    total = ad.add(total, ad.scale(dist, w.delta))
    return LossBundle(reg, auto, map_, cons, dist, total)
