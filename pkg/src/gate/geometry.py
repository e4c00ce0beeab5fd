"""Metric fields, Christoffel symbols, geodesics and pullback-metric diagnostics.

Everything here is numerical: metric derivatives come from central
differences and geodesics from classical Runge-Kutta. The module checks
the locally-flat picture at analytic test metrics and probes the metric
that a learned transfer map induces on its latent space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class GeometryError(ArithmeticError):
    pass


class SingularMetricError(GeometryError):
    def __init__(self, msg: str, condition: float):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


class IntegrationError(GeometryError):
    def __init__(self, msg: str, last_tau: float):
        super().__init__(f"{msg} (last valid tau {last_tau:.6g})")
        self.last_tau = last_tau


@dataclass(frozen=True)
class MetricField:
    dim: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    name: str = "metric"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected a point of shape ({self.dim},), got {x.shape}")
        g = np.asarray(self.evaluate(x), dtype=float)
        if g.shape != (self.dim, self.dim):
            raise ValueError(f"{self.name}: metric has shape {g.shape}, expected {(self.dim, self.dim)}")
        return g

    def check(self, x, tol: float = 1e-12) -> None:
        """Raise unless ``g(x)`` is symmetric with positive leading minors."""
        g = self(x)
        if np.max(np.abs(g - g.T)) >= tol:
            raise GeometryError(f"{self.name}: metric not symmetric at {x}")
        for k in range(1, self.dim + 1):
            if np.linalg.det(g[:k, :k]) <= 0:
                raise GeometryError(f"{self.name}: leading minor {k} not positive at {x}")

    def scaled(self, c: float) -> "MetricField":
        return MetricField(self.dim, lambda x: c * self.evaluate(x), f"{c}*{self.name}")


def euclidean(dim: int) -> MetricField:
    return MetricField(dim, lambda x: np.eye(dim), f"euclidean{dim}")


def sphere() -> MetricField:
    """Unit 2-sphere in (theta, phi): ``diag(1, sin(theta)^2)``."""
    return MetricField(2, lambda x: np.diag([1.0, np.sin(x[0]) ** 2]), "sphere")


def sphere_to_cartesian(x) -> np.ndarray:
    th, ph = x[0], x[1]
    return np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])


# ------------------------------------------------------------------ linear algebra


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting; ``b`` may hold several columns."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n = a.shape[0]
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    scale = np.max(np.abs(a)) if a.size else 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if scale == 0.0 or abs(a[p, k]) <= 1e-14 * scale:
            raise SingularMetricError("metric is singular to working precision", condition_estimate(a))
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        f = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(f, a[k, k:])
        b[k + 1:] -= np.outer(f, b[k])
    x = np.zeros_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x[:, 0] if vec else x


def condition_estimate(a: np.ndarray) -> float:
    """1-norm condition number; ``inf`` when ``a`` is numerically singular."""
    try:
        return float(np.linalg.cond(a, 1))
    except np.linalg.LinAlgError:
        return float("inf")


def inverse(g: np.ndarray) -> np.ndarray:
    return solve(g, np.eye(g.shape[0]))


# ------------------------------------------------------------------ Christoffel symbols


def metric_derivatives(g: MetricField, x, h: float = 1e-5) -> np.ndarray:
    """``dg[m, i, j] = d g_ij / d x^m`` by central differences."""
    x = np.asarray(x, dtype=float)
    d = g.dim
    out = np.empty((d, d, d))
    for m in range(d):
        e = np.zeros(d)
        e[m] = h
        out[m] = (g(x + e) - g(x - e)) / (2.0 * h)
    return out


def christoffel(g: MetricField, x, h: float = 1e-5) -> np.ndarray:
    """Second-kind symbols ``G[l, m, n]`` of the Levi-Civita connection at ``x``.

    The lower pair is symmetrized explicitly, so ``G[l, m, n] == G[l, n, m]``
    holds bit-for-bit.
    """
    x = np.asarray(x, dtype=float)
    gx = g(x)
    g_inv = inverse(gx)
    dg = metric_derivatives(g, x, h)
    # first kind: [m n, r] = 1/2 (d_m g_nr + d_n g_rm - d_r g_mn)
    first = 0.5 * (dg + dg.transpose(1, 0, 2) - np.moveaxis(dg, 0, 2))
    gamma = np.einsum("lr,mnr->lmn", g_inv, first)
    return 0.5 * (gamma + gamma.transpose(0, 2, 1))


# ------------------------------------------------------------------ geodesics


@dataclass
class GeodesicPath:
    tau: np.ndarray  # [S]
    x: np.ndarray  # [S, D]
    v: np.ndarray  # [S, D]
    step: float

    def speeds(self, g: MetricField) -> np.ndarray:
        """``g(v, v)`` at every sample."""
        return np.array([v @ g(x) @ v for x, v in zip(self.x, self.v)])


def _geodesic_rhs(g: MetricField, h: float):
    def rhs(x, v):
        gam = christoffel(g, x, h)
        return v, -np.einsum("rln,l,n->r", gam, v, v)
    return rhs


def geodesic_integrate(g: MetricField, x0, v0, tau_span: tuple[float, float], steps: int,
                       h: float = 1e-5) -> GeodesicPath:
    """Classical RK4 on ``x' = v``, ``v' = -G(x)[v, v]``."""
    if steps < 2:
        raise ValueError("geodesic integration needs at least 2 steps")
    t0, t1 = map(float, tau_span)
    dt = (t1 - t0) / steps
    x = np.asarray(x0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    if x.shape != (g.dim,) or v.shape != (g.dim,):
        raise ValueError("x0 and v0 must match the metric dimension")
    f = _geodesic_rhs(g, h)
    taus, xs, vs = [t0], [x.copy()], [v.copy()]
    for k in range(steps):
        t = t0 + k * dt
        try:
            k1x, k1v = f(x, v)
            k2x, k2v = f(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
            k3x, k3v = f(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
            k4x, k4v = f(x + dt * k3x, v + dt * k3v)
        except (GeometryError, ValueError, FloatingPointError) as exc:
            raise IntegrationError(f"metric evaluation failed: {exc}", t) from exc
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise IntegrationError("state became non-finite", t)
        taus.append(t0 + (k + 1) * dt)
        xs.append(x.copy())
        vs.append(v.copy())
    return GeodesicPath(np.array(taus), np.array(xs), np.array(vs), dt)


# ------------------------------------------------------------------ learned maps


def jacobian(f: Callable[[np.ndarray], np.ndarray], z, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian ``J[i, k] = d f_i / d z_k``."""
    z = np.asarray(z, dtype=float)
    cols = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        zp, zm = z + e, z - e
        # divide by the step actually taken, so linear maps come out exact
        cols.append((np.asarray(f(zp), dtype=float) - np.asarray(f(zm), dtype=float)) / (zp[k] - zm[k]))
    return np.stack(cols, axis=1)


def pullback_metric(f: Callable[[np.ndarray], np.ndarray], z, h: float = 1e-5) -> np.ndarray:
    """``J^T J`` for the map ``f`` at ``z``; symmetric positive semi-definite."""
    j = jacobian(f, z, h)
    g = j.T @ j
    return 0.5 * (g + g.T)


def flatness_residual(g) -> float:
    """Frobenius distance from the identity after dividing by the mean diagonal."""
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError("flatness_residual expects a square matrix")
    scale = np.trace(g) / g.shape[0]
    if scale <= 0:
        raise GeometryError("metric has non-positive mean diagonal")
    return float(np.linalg.norm(g / scale - np.eye(g.shape[0])))


def transfer_map(model, task: int = 0):
    """Eval-mode transfer network of ``task`` as a plain ``R^d -> R^d`` function."""
    from . import autodiff as ad
    from .autodiff import Value

    nets = model.tasks[task]

    def f(z: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return nets.transfer(Value(np.asarray(z, dtype=float)[None, :])).data[0]
    return f
