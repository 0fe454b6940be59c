"""Riemannian Gauss-Newton fitting of the low-Tucker-rank coefficient.

Each iteration solves the penalized least-squares problem restricted to the
tangent space at the current iterate, then retracts with the truncated HOSVD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .manifold import TangentFrame, manifold_dim
from .spline import Grid, SplineSystem
from .tensor import TuckerTensor, as_tensor, matricize, thosvd

log = logging.getLogger(__name__)


class UnderdeterminedError(ValueError):
    """The tangent system is singular: ``rho = 0`` with too few samples."""


class DivergenceError(RuntimeError):
    """The objective became non-finite."""


@dataclass
class RegressionData:
    """Responses ``y`` and weighted covariates ``Z[i, j0, ...] = dt[j0] * X[i, j0, ...]``."""

    y: np.ndarray
    Z: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.Z = as_tensor(self.Z, max_order=9)
        if self.Z.ndim < 2:
            raise ValueError("Z must have a sample axis and at least the functional mode")
        if self.Z.shape[0] != self.y.size or self.y.size < 1:
            raise ValueError(f"{self.y.size} responses for {self.Z.shape[0]} covariate tensors")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("responses must be finite")
        if self.Z.shape[1] != self.grid.size:
            raise ValueError(f"functional mode has extent {self.Z.shape[1]}, grid has {self.grid.size}")

    @classmethod
    def from_raw(cls, X: np.ndarray, y: np.ndarray, grid: Grid) -> "RegressionData":
        return cls(y, build_design(X, grid), grid)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def shape(self) -> tuple[int, ...]:
        return self.Z.shape[1:]

    def subset(self, idx) -> "RegressionData":
        return RegressionData(self.y[idx], self.Z[idx], self.grid)


def build_design(X: np.ndarray, grid: Grid) -> np.ndarray:
    X = as_tensor(X, max_order=9)
    if X.ndim < 2 or X.shape[1] != grid.size:
        raise ValueError(f"expected raw covariates with functional extent {grid.size}, got {X.shape}")
    w = grid.weights.reshape((1, -1) + (1,) * (X.ndim - 2))
    return X * w


def forward(data: RegressionData, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != data.shape:
        raise ValueError(f"coefficient shape {theta.shape} does not match covariates {data.shape}")
    return data.Z.reshape(data.n, -1) @ theta.ravel()


def adjoint(data: RegressionData, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    if v.size != data.n:
        raise ValueError(f"expected {data.n} weights, got {v.size}")
    return np.tensordot(v, data.Z, axes=1)


def objective(data: RegressionData, system: SplineSystem, rho: float, theta: np.ndarray) -> float:
    """``||y - Z theta||^2 / (2n) + (rho / 2) J(theta)``.

    The tangent step solves ``(M + n rho N) c = g``, whose minimizer carries
    half the penalty weight; the objective is scaled to match it.
    """
    r = data.y - forward(data, theta)
    return float(r @ r / (2 * data.n) + 0.5 * rho * system.penalty_value(theta))


@dataclass
class FitConfig:
    rank: tuple[int, ...]
    rho: float
    max_iter: int = 80
    rel_tol: float = 1e-8
    init: str | TuckerTensor = "spectral"
    safeguard: bool = True

    def __post_init__(self):
        self.rank = tuple(int(r) for r in self.rank)
        if self.rho < 0 or not np.isfinite(self.rho):
            raise ValueError("rho must be a finite non-negative number")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if any(r < 1 for r in self.rank):
            raise ValueError("ranks must be positive")
        if isinstance(self.init, str) and self.init != "spectral":
            raise ValueError(f"unknown init {self.init!r}")

    def validate(self, shape: Sequence[int]):
        if len(self.rank) != len(shape):
            raise ValueError(f"rank {self.rank} has wrong order for shape {tuple(shape)}")
        if any(r > p for r, p in zip(self.rank, shape)):
            raise ValueError(f"rank {self.rank} exceeds dimensions {tuple(shape)}")


@dataclass
class FitResult:
    theta_hat: TuckerTensor
    objective_trace: list[float]
    step_trace: list[float]
    converged: bool
    iterations: int
    spectral_gap: float
    error_trace: list[float] = field(default_factory=list)
    safeguard_events: int = 0
    jitter_events: int = 0

    @property
    def theta(self) -> np.ndarray:
        return self.theta_hat.full()


@dataclass
class TangentSystem:
    """Normal equations of the tangent-space subproblem at a frame."""

    frame: TangentFrame
    design: np.ndarray  # n x dim, rows are contracted Z_i
    gram: np.ndarray  # design^T design
    penalty: np.ndarray  # contract o A o extend
    rhs: np.ndarray  # design^T y

    def matrix(self, rho: float) -> np.ndarray:
        return self.gram + self.design.shape[0] * rho * self.penalty

    def solve(self, rho: float) -> tuple[np.ndarray, bool]:
        """Coefficients of the minimizer and whether diagonal jitter was needed."""
        n, dim = self.design.shape
        if rho == 0 and n < dim:
            raise UnderdeterminedError(
                f"rho = 0 needs at least {dim} samples (have {n}); use a small positive rho"
            )
        k = self.matrix(rho)
        try:
            return cho_solve(cho_factor(k), self.rhs), False
        except np.linalg.LinAlgError:
            jitter = 1e-12 * np.trace(k) / dim
            log.warning("tangent system not positive definite; adding jitter %.3e", jitter)
            return cho_solve(cho_factor(k + jitter * np.eye(dim)), self.rhs), True


def tangent_system(data: RegressionData, frame: TangentFrame, system: SplineSystem) -> TangentSystem:
    design = frame.contract_batch(data.Z)
    return TangentSystem(
        frame=frame,
        design=design,
        gram=design.T @ design,
        penalty=frame.penalty_gram(system.A),
        rhs=design.T @ data.y,
    )


def gn_step(data: RegressionData, frame: TangentFrame, system: SplineSystem, rho: float) -> np.ndarray:
    """Minimizer over the tangent space at ``frame``, as a dense tensor."""
    coef, _ = tangent_system(data, frame, system).solve(rho)
    return frame.extend(frame.unpack(coef))


def init_spectral(data: RegressionData, rank: Sequence[int]) -> TuckerTensor:
    return thosvd(adjoint(data, data.y), rank)


def spectral_gap(point: TuckerTensor) -> float:
    """Smallest retained singular value over all unfoldings."""
    gaps = []
    for d, r in enumerate(point.rank):
        s = np.linalg.svd(matricize(point.core, d), compute_uv=False)
        gaps.append(s[r - 1] if s.size >= r else 0.0)
    return float(min(gaps))


def fit(
    data: RegressionData,
    system: SplineSystem,
    config: FitConfig,
    truth: np.ndarray | None = None,
) -> FitResult:
    """Run the Gauss-Newton iteration from ``config.init``.

    When ``truth`` is given, the relative error of every iterate (including
    the initial point) is recorded in ``error_trace``.
    """
    config.validate(data.shape)
    rho = config.rho
    if rho == 0 and data.n < manifold_dim(data.shape, config.rank):
        raise UnderdeterminedError(
            f"rho = 0 needs at least {manifold_dim(data.shape, config.rank)} samples "
            f"(have {data.n}); use a small positive rho"
        )
    point = init_spectral(data, config.rank) if isinstance(config.init, str) else config.init
    current = point.full()
    obj = objective(data, system, rho, current)
    objectives, steps, errors = [obj], [], []
    truth_norm = None
    if truth is not None:
        truth_norm = np.linalg.norm(truth)
        errors.append(float(np.linalg.norm(current - truth) / truth_norm))
    converged = False
    safeguards = jitters = 0
    iterations = 0

    for k in range(config.max_iter):
        frame = TangentFrame(point)
        ts = tangent_system(data, frame, system)
        coef, jittered = ts.solve(rho)
        jitters += jittered
        candidate = thosvd(frame.extend(frame.unpack(coef)), config.rank)
        new = candidate.full()
        new_obj = objective(data, system, rho, new)

        if config.safeguard:
            anchor = frame.zeros()
            anchor.core = point.core.copy()
            anchor_vec = anchor.vector()
            tries = 0
            while np.isfinite(obj) and new_obj > 10 * obj and tries < 5:
                tries += 1
                coef = (coef + anchor_vec) / 2
                candidate = thosvd(frame.extend(frame.unpack(coef)), config.rank)
                new = candidate.full()
                new_obj = objective(data, system, rho, new)
            if tries:
                safeguards += 1
                log.info("iteration %d: step halved %d times", k, tries)

        if not np.isfinite(new_obj):
            raise DivergenceError(f"objective became non-finite at iteration {k}")
        norm = np.linalg.norm(current)
        step = float(np.linalg.norm(new - current) / norm) if norm > 0 else np.inf
        point, current, obj = candidate, new, new_obj
        objectives.append(obj)
        steps.append(step)
        if truth is not None:
            errors.append(float(np.linalg.norm(current - truth) / truth_norm))
        iterations = k + 1
        if step < config.rel_tol:
            converged = True
            break

    return FitResult(
        theta_hat=point,
        objective_trace=objectives,
        step_trace=steps,
        converged=converged,
        iterations=iterations,
        spectral_gap=spectral_gap(point),
        error_trace=errors,
        safeguard_events=safeguards,
        jitter_events=jitters,
    )


@dataclass
class ProfiledFit:
    gamma: np.ndarray
    result: FitResult
    objective_trace: list[float]
    outer_iterations: int


def profiled_fit(
    data: RegressionData,
    covariates: np.ndarray,
    system: SplineSystem,
    config: FitConfig,
    max_outer: int = 20,
) -> ProfiledFit:
    """Fit ``y = M gamma + <Z, theta>`` by alternating OLS and Gauss-Newton fits.

    The OLS step comes first (on ``y`` with the tensor part at zero); each
    subsequent tensor fit warm-starts from the previous estimate.
    """
    M = np.asarray(covariates, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.shape[0] != data.n:
        raise ValueError(f"{M.shape[0]} covariate rows for {data.n} samples")
    if np.linalg.matrix_rank(M) < M.shape[1]:
        raise ValueError("scalar covariate matrix is rank deficient")

    tensor_part = np.zeros(data.n)
    history: list[float] = []
    result = None
    init = config.init
    for outer in range(1, max_outer + 1):
        gamma = np.linalg.lstsq(M, data.y - tensor_part, rcond=None)[0]
        partial = RegressionData(data.y - M @ gamma, data.Z, data.grid)
        cfg = FitConfig(config.rank, config.rho, config.max_iter, config.rel_tol, init, config.safeguard)
        result = fit(partial, system, cfg)
        theta = result.theta
        tensor_part = forward(data, theta)
        gamma = np.linalg.lstsq(M, data.y - tensor_part, rcond=None)[0]
        r = data.y - M @ gamma - tensor_part
        history.append(float(r @ r / (2 * data.n) + 0.5 * config.rho * system.penalty_value(theta)))
        init = result.theta_hat
        if outer > 1 and abs(history[-2] - history[-1]) <= config.rel_tol * max(abs(history[-2]), 1e-300):
            break
    return ProfiledFit(gamma=gamma, result=result, objective_trace=history, outer_iterations=outer)
