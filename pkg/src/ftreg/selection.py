"""Tuning-parameter and rank selection by generalized cross-validation,
relative integrated squared error, and K-fold cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .solver import (
    FitConfig,
    FitResult,
    RegressionData,
    UnderdeterminedError,
    fit,
    forward,
    tangent_system,
)
from .manifold import TangentFrame
from .spline import SplineSystem

# candidate ranks reported for the (12, 8, 8) simulation design
TABLE1_RANKS: tuple[tuple[int, int, int], ...] = (
    (2, 3, 3), (2, 4, 3), (3, 3, 3), (3, 4, 3), (3, 4, 4), (4, 4, 4), (4, 4, 3),
    (5, 5, 5), (2, 3, 2), (2, 4, 2), (3, 3, 2), (3, 4, 2), (2, 2, 2), (3, 2, 2),
)


class OverParameterizedError(ValueError):
    """Effective degrees of freedom reach the sample size."""


def default_rho_grid() -> np.ndarray:
    return np.logspace(-12, -4, 17)


@dataclass
class GCVScore:
    gcv: float
    df: float
    rss: float


def gcv_details(data: RegressionData, result: FitResult, system: SplineSystem, rho: float) -> GCVScore:
    """GCV of the smoother linearized at the fitted point.

    ``H = D (M + n rho N)^{-1} D^T`` is the projector onto the design block of
    the stacked matrix ``[D; sqrt(n rho) N^{1/2}]``, so ``tr(H)`` and ``H y``
    come from one thin QR and stay accurate when ``M + n rho N`` is nearly
    singular.
    """
    ts = tangent_system(data, TangentFrame(result.theta_hat), system)
    n, dim = ts.design.shape
    if rho == 0 and n < dim:
        raise UnderdeterminedError("tangent system is singular at the fitted point")
    w, v = np.linalg.eigh(ts.penalty)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    q = np.linalg.qr(np.vstack([ts.design, np.sqrt(n * rho) * root.T]))[0][:n]
    fitted = q @ (q.T @ data.y)
    df = float(np.sum(q * q))
    resid = data.y - fitted
    rss = float(resid @ resid)
    denom = 1.0 - df / n
    # an interpolating smoother has df = n up to roundoff
    if denom <= 1e-9:
        raise OverParameterizedError(f"effective degrees of freedom {df:.1f} >= n = {n}")
    return GCVScore(gcv=rss / n / denom**2, df=df, rss=rss)


def gcv(data: RegressionData, result: FitResult, system: SplineSystem, rho: float) -> float:
    return gcv_details(data, result, system, rho).gcv


def hat_matrix(data: RegressionData, result: FitResult, system: SplineSystem, rho: float) -> np.ndarray:
    """Dense ``n x n`` smoother, assembled column by column (small problems only)."""
    ts = tangent_system(data, TangentFrame(result.theta_hat), system)
    k = ts.matrix(rho)
    cols = [ts.design @ np.linalg.solve(k, ts.design.T @ e) for e in np.eye(data.n)]
    return np.column_stack(cols)


def rise(theta_hat: np.ndarray, theta_true: np.ndarray, system: SplineSystem) -> float:
    """Relative integrated squared error of the interpolated coefficient."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_hat.shape != theta_true.shape:
        raise ValueError(f"shape mismatch: {theta_hat.shape} vs {theta_true.shape}")
    denom = system.l2_distance2(theta_true, np.zeros_like(theta_true))
    if denom <= 0:
        raise ValueError("true coefficient has zero norm")
    return system.l2_distance2(theta_hat, theta_true) / denom


@dataclass
class Candidate:
    rank: tuple[int, ...]
    rho: float
    gcv: float
    df: float
    iterations: int
    converged: bool
    spectral_gap: float
    rise: float | None = None
    error: str | None = None
    result: FitResult | None = field(default=None, repr=False)


@dataclass
class SelectionReport:
    candidates: list[Candidate]
    chosen: int

    @property
    def best(self) -> Candidate:
        return self.candidates[self.chosen]

    def best_per_rank(self) -> dict[tuple[int, ...], Candidate]:
        out: dict[tuple[int, ...], Candidate] = {}
        for c in self.candidates:
            if np.isfinite(c.gcv) and (c.rank not in out or c.gcv < out[c.rank].gcv):
                out[c.rank] = c
        return out

    def rows(self) -> list[dict]:
        return [
            {
                "rank": "x".join(map(str, c.rank)),
                "rho": c.rho,
                "gcv": c.gcv,
                "df": c.df,
                "rise": "" if c.rise is None else c.rise,
                "iterations": c.iterations,
                "converged": c.converged,
                "chosen": i == self.chosen,
                "error": c.error or "",
            }
            for i, c in enumerate(self.candidates)
        ]


def _argmin(cands: Sequence[Candidate]) -> int:
    scores = np.array([c.gcv for c in cands])
    if not np.any(np.isfinite(scores)):
        raise OverParameterizedError("no candidate produced a finite GCV score")
    # ties go to the larger rho, then the earlier rank in the grid
    return int(np.nanargmin(np.where(np.isfinite(scores), scores, np.nan)))


def _ladder(
    data: RegressionData,
    system: SplineSystem,
    rank: Sequence[int],
    rho_grid: Iterable[float],
    truth: np.ndarray | None,
    warm_start: bool,
    max_iter: int,
    rel_tol: float,
) -> list[Candidate]:
    rank = tuple(int(r) for r in rank)
    rhos = sorted({float(r) for r in rho_grid}, reverse=True)
    if not rhos:
        raise ValueError("empty rho grid")
    out = []
    init = "spectral"
    for rho in rhos:
        try:
            res = fit(data, system, FitConfig(rank, rho, max_iter, rel_tol, init))
            score = gcv_details(data, res, system, rho)
        except (OverParameterizedError, UnderdeterminedError, ValueError, np.linalg.LinAlgError) as exc:
            out.append(Candidate(rank, rho, np.inf, np.nan, 0, False, np.nan, error=str(exc)))
            continue
        out.append(
            Candidate(
                rank, rho, score.gcv, score.df, res.iterations, res.converged, res.spectral_gap,
                rise=None if truth is None else rise(res.theta, truth, system),
                result=res,
            )
        )
        if warm_start:
            init = res.theta_hat
    return out


def select_rho(
    data: RegressionData,
    system: SplineSystem,
    rank: Sequence[int],
    rho_grid: Iterable[float] | None = None,
    truth: np.ndarray | None = None,
    warm_start: bool = True,
    max_iter: int = 80,
    rel_tol: float = 1e-8,
) -> tuple[float, SelectionReport]:
    """Fit along a descending rho ladder and return the GCV minimizer."""
    grid = default_rho_grid() if rho_grid is None else rho_grid
    cands = _ladder(data, system, rank, grid, truth, warm_start, max_iter, rel_tol)
    report = SelectionReport(cands, _argmin(cands))
    return report.best.rho, report


def select_rank(
    data: RegressionData,
    system: SplineSystem,
    rank_grid: Iterable[Sequence[int]],
    rho_grid: Iterable[float] | None = None,
    truth: np.ndarray | None = None,
    warm_start: bool = True,
    max_iter: int = 80,
    rel_tol: float = 1e-8,
) -> tuple[tuple[int, ...], SelectionReport]:
    grid = list(default_rho_grid() if rho_grid is None else rho_grid)
    ranks = [tuple(int(r) for r in rk) for rk in rank_grid]
    if not ranks:
        raise ValueError("empty rank grid")
    cands: list[Candidate] = []
    for rk in ranks:
        cands.extend(_ladder(data, system, rk, grid, truth, warm_start, max_iter, rel_tol))
    report = SelectionReport(cands, _argmin(cands))
    return report.best.rank, report


def rank_grid(shape: Sequence[int], max_rank: int = 4, max_dim: int | None = None) -> list[tuple[int, ...]]:
    """All ranks with entries in ``1..max_rank`` (capped by the shape) and manifold dimension at most ``max_dim``."""
    from itertools import product

    from .manifold import manifold_dim

    ranges = [range(1, min(max_rank, p) + 1) for p in shape]
    out = []
    for rk in product(*ranges):
        # a Tucker rank needs r_d <= prod of the others
        if any(r > int(np.prod(rk)) // r for r in rk):
            continue
        if max_dim is not None and manifold_dim(shape, rk) > max_dim:
            continue
        out.append(tuple(rk))
    return out


def fold_indices(n: int, K: int, seed: int = 0) -> list[np.ndarray]:
    """Contiguous blocks of a seeded permutation of ``range(n)``."""
    if not 2 <= K <= n:
        raise ValueError(f"need 2 <= K <= n, got K = {K}, n = {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, K)]


def kfold_cv(data: RegressionData, system: SplineSystem, config: FitConfig, K: int, seed: int = 0) -> float:
    """Mean squared out-of-fold prediction error."""
    total = 0.0
    for test in fold_indices(data.n, K, seed):
        train = np.setdiff1d(np.arange(data.n), test)
        res = fit(data.subset(train), system, config)
        r = data.y[test] - forward(data.subset(test), res.theta)
        total += float(r @ r)
    return total / data.n
