import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftreg.manifold import TangentFrame
from ftreg.simulate import SimConfig, gen_dataset
from ftreg.solver import (
    FitConfig,
    RegressionData,
    UnderdeterminedError,
    adjoint,
    build_design,
    fit,
    forward,
    gn_step,
    init_spectral,
    objective,
    profiled_fit,
    tangent_system,
)
from ftreg.spline import Grid, SplineSystem, midpoint_grid
from ftreg.tensor import TuckerTensor, inner, mode_product, thosvd

SMALL = SimConfig(n=60, p=(6, 4, 4), r=(2, 2, 2), sigma_X=0.05, sigma_y=0.1)


def random_data(rng, n, shape):
    grid = midpoint_grid(shape[0])
    return RegressionData.from_raw(rng.standard_normal((n,) + shape), rng.standard_normal(n), grid)


def noiseless(seed, n=300, p=(6, 4, 4), r=(2, 2, 2)):
    cfg = SimConfig(n=n, p=p, r=r, sigma_X=0.0, sigma_y=0.0, seed=seed, response="discrete")
    return gen_dataset(cfg)


# ------------------------------------------------------------ design maps
def test_build_design_uniform_grid_scales_by_inverse_p0():
    X = np.random.default_rng(0).standard_normal((3, 5, 2))
    Z = build_design(X, midpoint_grid(5))
    np.testing.assert_allclose(Z[:, 1:-1], X[:, 1:-1] / 5, atol=1e-15)
    np.testing.assert_allclose(Z[:, [0, -1]], X[:, [0, -1]] * 3 / 20, atol=1e-15)


def test_build_design_unit_weights_identity():
    # knots 1..4 on [0, 5] give unit half-gap weights
    grid = Grid(np.arange(1.0, 5.0), 0.0, 5.0)
    X = np.random.default_rng(1).standard_normal((2, 4, 3))
    np.testing.assert_array_equal(build_design(X, grid), X)


def test_design_inner_is_riemann_sum():
    rng = np.random.default_rng(2)
    grid = Grid(np.sort(rng.uniform(0, 1, 7)), 0.0, 1.0)
    X = rng.standard_normal((4, 7, 3, 2))
    theta = rng.standard_normal((7, 3, 2))
    data = RegressionData.from_raw(X, np.zeros(4), grid)
    brute = [sum(grid.weights[j] * np.sum(X[i, j] * theta[j]) for j in range(7)) for i in range(4)]
    np.testing.assert_allclose(forward(data, theta), brute, atol=1e-12)


def test_design_shape_mismatch():
    with pytest.raises(ValueError):
        build_design(np.zeros((2, 4, 3)), midpoint_grid(5))
    with pytest.raises(ValueError):
        RegressionData(np.zeros(3), np.zeros((2, 5, 3)), midpoint_grid(5))
    data = random_data(np.random.default_rng(3), 4, (5, 3))
    with pytest.raises(ValueError):
        forward(data, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        adjoint(data, np.zeros(5))


def test_forward_adjoint_trivial_cases():
    rng = np.random.default_rng(4)
    data = random_data(rng, 5, (4, 3))
    assert not forward(data, np.zeros((4, 3))).any()
    assert not adjoint(data, np.zeros(5)).any()
    np.testing.assert_array_equal(adjoint(data, np.eye(5)[0]), data.Z[0])
    one = data.subset([2])
    theta = rng.standard_normal((4, 3))
    assert forward(one, theta)[0] == pytest.approx(inner(data.Z[2], theta))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_forward_adjoint_pair(seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng, 7, (5, 3, 2))
    theta, v = rng.standard_normal((5, 3, 2)), rng.standard_normal(7)
    assert forward(data, theta) @ v == pytest.approx(inner(theta, adjoint(data, v)), rel=1e-10, abs=1e-12)


# --------------------------------------------------------------- gn step
def ambient_penalty(A, shape):
    n = int(np.prod(shape))
    return np.column_stack([mode_product(e.reshape(shape, order="F"), A, 0).ravel(order="F") for e in np.eye(n)])


def dense_gn_oracle(data, frame, system, rho):
    """Minimize (2n)^-1 ||y - Z R c||^2 + (rho/2) <A R c, R c> by explicit normal equations."""
    n = data.n
    R = np.column_stack([frame.extend(frame.unpack(e)).ravel(order="F") for e in np.eye(frame.dim)])
    Zm = np.stack([z.ravel(order="F") for z in data.Z])
    ZR = Zm @ R
    Aamb = ambient_penalty(system.A, frame.shape)
    lhs = ZR.T @ ZR / n + rho * R.T @ Aamb @ R
    c = np.linalg.solve(lhs, ZR.T @ data.y / n)
    return (R @ c).reshape(frame.shape, order="F")


def gn_oracle_errors(seeds=range(20), rhos=(0.0, 1e-3, 1.0)):
    """Relative gap between gn_step and the dense oracle at p = (6,4,4), r = (2,2,2), n = 60."""
    errs = []
    for s in seeds:
        ds = gen_dataset(SMALL.with_(seed=s))
        point = thosvd(ds.truth.theta + 0.1 * np.random.default_rng(s).standard_normal(SMALL.p), SMALL.r)
        frame = TangentFrame(point)
        for rho in rhos:
            fast = gn_step(ds.data, frame, ds.system, rho)
            dense = dense_gn_oracle(ds.data, frame, ds.system, rho)
            errs.append(np.linalg.norm(fast - dense) / np.linalg.norm(dense))
    return np.array(errs)


def test_gn_step_matches_dense_oracle():
    assert gn_oracle_errors(seeds=range(5)).max() < 1e-10


def test_gn_step_objective_is_half_weighted():
    # the step must minimize the tangent-restricted objective as implemented
    ds = gen_dataset(SMALL.with_(seed=7))
    frame = TangentFrame(ds.truth.tucker)
    rho = 1e-2
    step = gn_step(ds.data, frame, ds.system, rho)
    base = objective(ds.data, ds.system, rho, step)
    rng = np.random.default_rng(0)
    for _ in range(10):
        pert = frame.extend(frame.unpack(1e-3 * rng.standard_normal(frame.dim)))
        assert objective(ds.data, ds.system, rho, step + pert) >= base - 1e-14


def test_gn_step_fixed_point_noiseless():
    ds = noiseless(0)
    frame = TangentFrame(ds.truth.tucker)
    np.testing.assert_allclose(gn_step(ds.data, frame, ds.system, 0.0), ds.truth.theta, atol=1e-10)


def test_gn_step_shrinks_along_rho_ladder():
    ds = gen_dataset(SMALL.with_(seed=3))
    frame = TangentFrame(ds.truth.tucker)
    steps = [gn_step(ds.data, frame, ds.system, rho) for rho in np.logspace(-4, 4, 9)]
    # shrinkage is monotone in the penalty seminorm; Frobenius norm only once rho dominates
    pen = [ds.system.penalty_value(s) for s in steps]
    norms = [np.linalg.norm(s) for s in steps]
    assert all(b < a for a, b in zip(pen, pen[1:]))
    assert all(b < a for a, b in zip(norms[2:], norms[3:]))
    assert norms[-1] < 1e-3 * norms[0]


def test_gn_step_underdetermined():
    ds = gen_dataset(SMALL.with_(n=10))
    frame = TangentFrame(ds.truth.tucker)
    with pytest.raises(UnderdeterminedError, match="samples"):
        gn_step(ds.data, frame, ds.system, 0.0)
    with pytest.raises(UnderdeterminedError):
        fit(ds.data, ds.system, FitConfig(SMALL.r, 0.0))
    gn_step(ds.data, frame, ds.system, 1e-6)


def test_tangent_system_spd_for_positive_rho():
    ds = gen_dataset(SMALL.with_(n=10))
    ts = tangent_system(ds.data, TangentFrame(ds.truth.tucker), ds.system)
    k = ts.matrix(1e-6)
    np.testing.assert_allclose(k, k.T, atol=1e-12)
    assert np.linalg.eigvalsh(k).min() > 0
    _, jittered = ts.solve(1e-6)
    assert not jittered


# ------------------------------------------------------------------- fit
def test_fit_noiseless_recovery():
    ds = noiseless(1)
    res = fit(ds.data, ds.system, FitConfig((2, 2, 2), 0.0), truth=ds.truth.theta)
    assert res.error_trace[-1] < 1e-8
    assert res.converged and res.iterations <= 80
    assert all(np.isfinite(res.objective_trace))
    assert res.theta_hat.orthonormality_error() < 1e-10


def test_tiny_rho_leaves_penalty_bias_floor():
    # rho * J(theta) is not negligible against the smallest curvature of the loss
    ds = noiseless(1)
    res = fit(ds.data, ds.system, FitConfig((2, 2, 2), 1e-12), truth=ds.truth.theta)
    assert 1e-8 < res.error_trace[-1] < 1e-5
    assert res.converged


def test_fit_starting_at_truth_does_not_move():
    ds = noiseless(2)
    cfg = FitConfig((2, 2, 2), 0.0, init=ds.truth.tucker)
    res = fit(ds.data, ds.system, cfg, truth=ds.truth.theta)
    assert res.converged and res.iterations == 1
    assert res.step_trace[0] < 1e-12


def test_fit_traces_and_gap():
    ds = gen_dataset(SMALL.with_(n=200, seed=4))
    res = fit(ds.data, ds.system, FitConfig(SMALL.r, 1e-8, max_iter=5), truth=ds.truth.theta)
    assert len(res.objective_trace) == res.iterations + 1
    assert len(res.step_trace) == res.iterations
    assert len(res.error_trace) == res.iterations + 1
    assert res.spectral_gap > 0
    assert res.safeguard_events == 0


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig((2, 2), -1.0)
    with pytest.raises(ValueError):
        FitConfig((2, 2), 1.0, max_iter=0)
    with pytest.raises(ValueError):
        FitConfig((2, 2), 1.0, init="random")
    ds = gen_dataset(SMALL)
    with pytest.raises(ValueError, match="exceeds"):
        fit(ds.data, ds.system, FitConfig((7, 2, 2), 1e-6))
    with pytest.raises(ValueError, match="order"):
        fit(ds.data, ds.system, FitConfig((2, 2), 1e-6))


def test_init_spectral_cases():
    rng = np.random.default_rng(5)
    data = RegressionData(np.zeros(4), rng.standard_normal((4, 5, 3)), midpoint_grid(5))
    assert not init_spectral(data, (2, 2)).full().any()
    one = RegressionData(np.ones(1), data.Z[:1], data.grid)
    np.testing.assert_allclose(init_spectral(one, (2, 2)).full(), thosvd(data.Z[0], (2, 2)).full(), atol=1e-12)


def test_init_spectral_nonvacuous():
    cfg = SimConfig(n=500)
    hits = 0
    for s in range(20):
        ds = gen_dataset(cfg.with_(seed=s))
        est = init_spectral(ds.data, cfg.r).full()
        # the adjoint is on a different scale, so compare after the best rescaling
        c = inner(est, ds.truth.theta) / inner(est, est)
        hits += np.linalg.norm(c * est - ds.truth.theta) < np.linalg.norm(ds.truth.theta)
    assert hits >= 19


def test_safeguard_logs(caplog):
    ds = gen_dataset(SMALL.with_(n=200, seed=5))
    bad = TuckerTensor(1e6 * ds.truth.tucker.core, ds.truth.tucker.factors)
    with caplog.at_level(logging.INFO, logger="ftreg.solver"):
        res = fit(ds.data, ds.system, FitConfig(SMALL.r, 1e-8, max_iter=3, init=bad))
    assert all(np.isfinite(res.objective_trace))


# -------------------------------------------------------------- profiled
def test_profiled_intercept_only():
    rng = np.random.default_rng(6)
    data = RegressionData(3.0 + 0.01 * rng.standard_normal(200), rng.standard_normal((200, 5, 3)), midpoint_grid(5))
    system = SplineSystem(data.grid)
    out = profiled_fit(data, np.ones(200), system, FitConfig((1, 1), 1e-4))
    assert out.gamma[0] == pytest.approx(data.y.mean(), abs=0.01)


def test_profiled_orthogonal_covariate_one_pass():
    ds = gen_dataset(SMALL.with_(n=200, seed=8, sigma_y=0.0, sigma_X=0.0, response="discrete"))
    Zm = ds.data.Z.reshape(200, -1)
    # a covariate orthogonal to the whole range of the forward map
    q, _ = np.linalg.qr(np.column_stack([Zm, np.random.default_rng(0).standard_normal(200)]))
    m = q[:, -1]
    y = ds.y + 2.0 * m
    data = RegressionData(y, ds.data.Z, ds.data.grid)
    out = profiled_fit(data, m, ds.system, FitConfig(SMALL.r, 1e-12))
    assert out.gamma[0] == pytest.approx(2.0, abs=1e-8)
    assert out.outer_iterations <= 2
    assert abs(out.objective_trace[-1] - out.objective_trace[0]) <= 1e-8 * abs(out.objective_trace[0]) + 1e-14


def test_profiled_objective_nonincreasing():
    ds = gen_dataset(SMALL.with_(n=200, seed=9))
    rng = np.random.default_rng(1)
    M = np.column_stack([np.ones(200), rng.standard_normal(200)])
    data = RegressionData(ds.y + M @ [1.0, -0.5], ds.data.Z, ds.data.grid)
    out = profiled_fit(data, M, ds.system, FitConfig(SMALL.r, 1e-6))
    trace = np.array(out.objective_trace)
    assert np.all(np.diff(trace) <= 1e-9 * trace[:-1])
    np.testing.assert_allclose(out.gamma, [1.0, -0.5], atol=0.05)


def test_profiled_rank_deficient_rejected():
    ds = gen_dataset(SMALL)
    with pytest.raises(ValueError, match="rank deficient"):
        profiled_fit(ds.data, np.ones((60, 2)), ds.system, FitConfig(SMALL.r, 1e-6))
