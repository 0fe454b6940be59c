"""Synthetic functional-tensor regression data.

Covariates follow a truncated Karhunen-Loeve expansion
``X_i(t) = sum_k k^-1 phi_k(t) Y_ik`` over the orthonormal sine basis
``phi_k(t) = sqrt(2) sin(k pi t)`` with standard normal tensors
``Y_ik``; they are observed on the grid with additive Gaussian noise.
Responses integrate ``<X_i(t), B(t)>`` over the domain, with ``B`` the
natural cubic interpolant of the truth's mode-0 slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .solver import RegressionData
from .spline import Grid, SplineSystem, gauss_legendre_nodes, midpoint_grid
from .tensor import TuckerTensor, fix_signs

ROLES = {"truth": 0, "covariates": 1, "obs_noise": 2, "resp_noise": 3, "folds": 4}


def stream(seed: int, replication: int, role: str) -> np.random.Generator:
    """Independent generator for one (replication, role) pair."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replication, ROLES[role]))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    p: tuple[int, ...] = (12, 8, 8)
    r: tuple[int, ...] = (2, 3, 3)
    kl_terms: int = 30
    sigma_X: float = 0.05
    sigma_y: float = 0.1
    seed: int = 0
    # fixed truth across replications unless set; see run_experiment
    vary_truth: bool = False
    # "integral": y_i = int <X_i, B>; "discrete": y_i = <Z_i, theta> (no discretization bias)
    response: str = "integral"
    grid_points: tuple[float, ...] | None = None
    quad_nodes: int = 8
    # sqrt(2) sin(k pi t) is the orthonormal sine basis on [0, 1]
    basis_scale: float = float(np.sqrt(2.0))

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(int(q) for q in self.p))
        object.__setattr__(self, "r", tuple(int(q) for q in self.r))
        if len(self.p) != len(self.r) or len(self.p) < 2:
            raise ValueError("p and r must have the same length (at least 2)")
        if self.n < 1 or any(q < 1 for q in self.p) or any(q < 1 for q in self.r):
            raise ValueError("sizes must be positive")
        if any(r > p for r, p in zip(self.r, self.p)):
            raise ValueError(f"rank {self.r} exceeds dimensions {self.p}")
        if self.sigma_X < 0 or self.sigma_y < 0:
            raise ValueError("noise levels must be non-negative")
        if self.response not in ("integral", "discrete"):
            raise ValueError(f"unknown response mode {self.response!r}")
        if self.grid_points is not None and len(self.grid_points) != self.p[0]:
            raise ValueError("grid_points must have p[0] entries")

    def grid(self) -> Grid:
        if self.grid_points is None:
            return midpoint_grid(self.p[0])
        return Grid(np.asarray(self.grid_points), 0.0, 1.0)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass
class SimTruth:
    theta: np.ndarray
    tucker: TuckerTensor


@dataclass
class SimDataset:
    data: RegressionData
    X: np.ndarray
    y: np.ndarray
    truth: SimTruth
    system: SplineSystem = field(repr=False)


def haar_factor(rng: np.random.Generator, p: int, r: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((p, r)))
    return fix_signs(q)


def gen_truth(config: SimConfig, replication: int = 0) -> SimTruth:
    rng = stream(config.seed, replication if config.vary_truth else 0, "truth")
    core = rng.standard_normal(config.r)
    factors = tuple(haar_factor(rng, p, r) for p, r in zip(config.p, config.r))
    tucker = TuckerTensor(core, factors)
    return SimTruth(tucker.full(), tucker)


def kl_weights(times: np.ndarray, kl_terms: int, scale: float = 1.0) -> np.ndarray:
    """``[scale k^-1 sin(k pi t)]`` with shape ``(len(times), kl_terms)``."""
    k = np.arange(1, kl_terms + 1)
    return scale * np.sin(np.pi * np.outer(times, k)) / k


def response_loadings(system: SplineSystem, kl_terms: int, quad_nodes: int = 8, scale: float = 1.0) -> np.ndarray:
    """``C[k, j] = int k^-1 sin(k pi t) l_j(t) dt`` for the cardinal functions ``l_j``."""
    g = system.grid
    knots = np.concatenate([[g.lower], g.points, [g.upper]])
    # split knot intervals so no panel spans more than half a period of the fastest sine
    edges = [knots[:1]]
    for a, b in zip(knots[:-1], knots[1:]):
        pieces = max(1, int(np.ceil((b - a) * kl_terms - 1e-9)))
        edges.append(np.linspace(a, b, pieces + 1)[1:])
    nodes, weights = gauss_legendre_nodes(np.concatenate(edges), quad_nodes)
    phi = kl_weights(nodes, kl_terms, scale)
    return phi.T @ (weights[:, None] * system.basis(nodes))


def noiseless_covariates(scores: np.ndarray, times: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """``X_i(t_j)`` from KL scores of shape ``(n, K, p1, ..., pD)``."""
    phi = kl_weights(times, scores.shape[1], scale)
    return np.moveaxis(np.tensordot(phi, scores, axes=(1, 1)), 0, 1)


def gen_dataset(config: SimConfig, truth: SimTruth | None = None, replication: int = 0) -> SimDataset:
    if truth is None:
        truth = gen_truth(config, replication)
    grid = config.grid()
    system = SplineSystem(grid)
    tab = config.p[1:]

    scores = stream(config.seed, replication, "covariates").standard_normal(
        (config.n, config.kl_terms) + tab
    )
    X_clean = noiseless_covariates(scores, grid.points, config.basis_scale)
    X = X_clean
    if config.sigma_X > 0:
        X = X + config.sigma_X * stream(config.seed, replication, "obs_noise").standard_normal(X.shape)

    if config.response == "integral":
        loadings = response_loadings(system, config.kl_terms, config.quad_nodes, config.basis_scale)
        coef = np.tensordot(loadings, truth.theta, axes=(1, 0))  # K x p1 x ... x pD
        signal = scores.reshape(config.n, -1) @ coef.ravel()
    else:
        w = grid.weights.reshape((1, -1) + (1,) * len(tab))
        signal = (X_clean * w).reshape(config.n, -1) @ truth.theta.ravel()
    eps = config.sigma_y * stream(config.seed, replication, "resp_noise").standard_normal(config.n)
    y = signal + eps
    return SimDataset(RegressionData.from_raw(X, y, grid), X, y, truth, system)
