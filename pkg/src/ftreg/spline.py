"""Observation grid, natural cubic interpolation along the functional mode,
and the roughness penalty built on knot values.

The roughness matrix uses the knot-value form of a natural cubic spline
(Green & Silverman): with ``Q`` (p0 x p0-2) and tridiagonal ``R``
(p0-2 x p0-2) the interior second derivatives are ``gamma = R^{-1} Q^T b``
and ``int g''(t)^2 dt = b^T Q R^{-1} Q^T b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .tensor import inner, mode_product

QUAD_NODES = 8


class QuasiUniformityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Grid:
    points: np.ndarray
    lower: float
    upper: float
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.points, dtype=float).ravel()
        lo, hi = float(self.lower), float(self.upper)
        if t.size < 1:
            raise ValueError("grid needs at least one point")
        if not np.all(np.isfinite(t)) or not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("grid values must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid points must be strictly increasing without duplicates")
        if not (lo < t[0] and t[-1] < hi):
            raise ValueError(f"grid points must lie strictly inside ({lo}, {hi})")
        ext = np.concatenate([[lo], t, [hi]])
        object.__setattr__(self, "points", t)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "weights", (ext[2:] - ext[:-2]) / 2.0)
        if self.quasi_uniformity > 10:
            warnings.warn(
                f"grid is far from quasi-uniform (C0 = {self.quasi_uniformity:.2f})",
                QuasiUniformityWarning,
                stacklevel=3,
            )

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def length(self) -> float:
        return self.upper - self.lower

    @property
    def quasi_uniformity(self) -> float:
        """``max_j max(p0 dt_j / L, L / (p0 dt_j))`` with ``L`` the domain length."""
        s = self.size * self.weights / self.length
        return float(np.max(np.maximum(s, 1.0 / s)))


def build_grid(points: Sequence[float], endpoints: tuple[float, float]) -> Grid:
    return Grid(np.asarray(points, dtype=float), endpoints[0], endpoints[1])


def midpoint_grid(p0: int, lower: float = 0.0, upper: float = 1.0) -> Grid:
    """``t_j = lower + (j - 1/2) (upper - lower) / p0``."""
    j = np.arange(1, p0 + 1)
    return Grid(lower + (j - 0.5) * (upper - lower) / p0, lower, upper)


def _knot_matrices(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``Q`` (``p0 x (p0 - 2)``) and tridiagonal ``R``."""
    p0 = t.size
    h = np.diff(t)
    q = np.zeros((p0, p0 - 2))
    for j in range(p0 - 2):
        q[j, j] = 1.0 / h[j]
        q[j + 1, j] = -1.0 / h[j] - 1.0 / h[j + 1]
        q[j + 2, j] = 1.0 / h[j + 1]
    off = h[1:-1] / 6.0
    r = np.diag((h[:-1] + h[1:]) / 3.0) + np.diag(off, 1) + np.diag(off, -1)
    return q, r


def gauss_legendre_nodes(edges: np.ndarray, npts: int = QUAD_NODES):
    """Composite Gauss-Legendre nodes and weights over consecutive ``edges``."""
    x, w = np.polynomial.legendre.leggauss(npts)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (a + b) / 2 + (b - a) / 2 * x
    weights = (b - a) / 2 * w
    return nodes.ravel(), weights.ravel()


class SplineSystem:
    """Interpolation map and penalty matrices for a grid (cubic, ``m = 2``).

    Attributes ``omega`` (roughness), ``G`` (polynomial design), ``delta``
    (diagonal of weights), ``P`` (weighted polynomial projector), ``A``
    (penalty) and ``omega0`` (L2 Gram of the interpolant) are all
    ``p0 x p0`` except ``G`` which is ``p0 x m``.
    """

    def __init__(self, grid: Grid, m: int = 2):
        if m != 2:
            raise ValueError("only cubic natural splines (m = 2) are supported")
        if grid.size < m + 1:
            raise ValueError(f"need at least {m + 1} grid points, got {grid.size}")
        self.grid = grid
        self.m = m
        t = grid.points
        p0 = t.size

        q, r = _knot_matrices(t)
        # gamma_interior = R^{-1} Q^T b, stored as a p0 x p0 map with zero end rows
        self._second = np.zeros((p0, p0))
        self._second[1:-1] = cho_solve(cho_factor(r), q.T)
        self.omega = q @ self._second[1:-1]
        self.omega = (self.omega + self.omega.T) / 2

        self.G = np.vander(t, m, increasing=True)
        self.delta = np.diag(grid.weights)
        gdg = self.G.T @ self.delta @ self.G
        try:
            gdg_f = cho_factor(gdg)
        except np.linalg.LinAlgError as exc:  # distinct points make this impossible
            raise RuntimeError("weighted polynomial Gram matrix is singular") from exc
        self.P = self.G @ cho_solve(gdg_f, self.G.T @ self.delta)
        dp = self.delta @ self.P
        self.A = self.omega + (dp + dp.T) / 2

        edges = np.concatenate([[grid.lower], t, [grid.upper]])
        nodes, weights = gauss_legendre_nodes(edges)
        basis = self.basis(nodes)
        self.omega0 = basis.T @ (weights[:, None] * basis)
        self.omega0 = (self.omega0 + self.omega0.T) / 2

    @property
    def p0(self) -> int:
        return self.grid.size

    def basis(self, times) -> np.ndarray:
        """Cardinal functions at ``times``: row ``k`` maps knot values to ``g(times[k])``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        g = self.grid
        span = 1e-12 * max(1.0, g.length)
        if np.any(times < g.lower - span) or np.any(times > g.upper + span):
            raise ValueError(f"evaluation times must lie in [{g.lower}, {g.upper}]")
        t = g.points
        p0 = t.size
        h = np.diff(t)
        eye = np.eye(p0)
        out = np.empty((times.size, p0))

        left = times < t[0]
        right = times > t[-1]
        inside = ~(left | right)

        # natural splines continue linearly past the boundary knots
        slope0 = (eye[1] - eye[0]) / h[0] - h[0] * self._second[1] / 6
        slope1 = (eye[-1] - eye[-2]) / h[-1] + h[-1] * self._second[-2] / 6
        out[left] = eye[0] + (times[left] - t[0])[:, None] * slope0
        out[right] = eye[-1] + (times[right] - t[-1])[:, None] * slope1

        ti = times[inside]
        i = np.clip(np.searchsorted(t, ti, side="right") - 1, 0, p0 - 2)
        hi = h[i][:, None]
        a = (ti - t[i])[:, None]
        b = (t[i + 1] - ti)[:, None]
        out[inside] = (
            (a * eye[i + 1] + b * eye[i]) / hi
            - a * b / 6 * ((1 + a / hi) * self._second[i + 1] + (1 + b / hi) * self._second[i])
        )
        return out

    def eval_coefficient(self, theta: np.ndarray, times) -> np.ndarray:
        """Interpolated coefficient ``B(t)`` at ``times``; returns shape ``(len(times), p1, ..., pD)``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.p0:
            raise ValueError(f"mode 0 has extent {theta.shape[0]}, grid has {self.p0} points")
        return mode_product(theta, self.basis(times), 0)

    def penalty_value(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.p0:
            raise ValueError(f"mode 0 has extent {theta.shape[0]}, grid has {self.p0} points")
        return inner(mode_product(theta, self.A, 0), theta)

    def l2_distance2(self, a: np.ndarray, b: np.ndarray) -> float:
        """``int ||B_a(t) - B_b(t)||_F^2 dt`` through the Gram matrix ``omega0``."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        return inner(mode_product(diff, self.omega0, 0), diff)


def build_system(grid: Grid, m: int = 2) -> SplineSystem:
    return SplineSystem(grid, m)


def roughness_matrix(grid: Grid, m: int = 2) -> np.ndarray:
    return SplineSystem(grid, m).omega


def penalty_matrix(system: SplineSystem) -> np.ndarray:
    return system.A


def l2_gram(system: SplineSystem) -> np.ndarray:
    return system.omega0


def eval_coefficient(theta: np.ndarray, times, system: SplineSystem) -> np.ndarray:
    return system.eval_coefficient(theta, times)


def penalty_value(theta: np.ndarray, system: SplineSystem) -> float:
    return system.penalty_value(theta)
