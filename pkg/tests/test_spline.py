import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from ftreg.spline import (
    Grid,
    QuasiUniformityWarning,
    SplineSystem,
    build_grid,
    eval_coefficient,
    gauss_legendre_nodes,
    l2_gram,
    midpoint_grid,
    penalty_matrix,
    penalty_value,
    roughness_matrix,
)

# frozen from the independent moment-equation oracle below, t**2 on the 12-point midpoint grid
T_SQUARED_ROUGHNESS_12 = 3.474216380182005


# ---------------------------------------------------------------- oracle
def oracle_moments(t, b):
    """Second derivatives of the natural cubic interpolant, textbook tridiagonal system."""
    n, h = len(t), np.diff(t)
    a = np.zeros((n, n))
    r = np.zeros(n)
    a[0, 0] = a[-1, -1] = 1.0
    for i in range(1, n - 1):
        a[i, i - 1], a[i, i], a[i, i + 1] = h[i - 1] / 6, (h[i - 1] + h[i]) / 3, h[i] / 6
        r[i] = (b[i + 1] - b[i]) / h[i] - (b[i] - b[i - 1]) / h[i - 1]
    return np.linalg.solve(a, r)


def oracle_roughness(t, b):
    # g'' is linear on each interval, so the integral of its square is exact
    m, h = oracle_moments(t, b), np.diff(t)
    return float(np.sum(h / 3 * (m[:-1] ** 2 + m[:-1] * m[1:] + m[1:] ** 2)))


def oracle_eval(t, b, x):
    m, h = oracle_moments(t, b), np.diff(t)
    i = int(np.clip(np.searchsorted(t, x) - 1, 0, len(t) - 2))
    a, c = t[i + 1] - x, x - t[i]
    return (m[i] * a**3 + m[i + 1] * c**3) / (6 * h[i]) + (b[i] / h[i] - m[i] * h[i] / 6) * a + (
        b[i + 1] / h[i] - m[i + 1] * h[i] / 6
    ) * c


def oracle_penalty(grid, theta):
    """Both summands of the penalty by direct evaluation, fiber by fiber."""
    t, w = grid.points, grid.weights
    fibers = theta.reshape(theta.shape[0], -1)
    rough = sum(oracle_roughness(t, fibers[:, k]) for k in range(fibers.shape[1]))
    g = np.column_stack([np.ones_like(t), t])
    coef = np.linalg.lstsq(np.sqrt(w)[:, None] * g, np.sqrt(w)[:, None] * fibers, rcond=None)[0]
    fit = g @ coef
    return rough + float(np.sum(w[:, None] * fit**2))


def random_grid(rng, p0, lower=0.0, upper=1.0):
    while True:
        pts = np.sort(rng.uniform(lower, upper, p0))
        gaps = np.diff(np.concatenate([[lower], pts, [upper]]))
        if 0.2 < gaps.min() * p0 / (upper - lower) and gaps.max() * p0 / (upper - lower) < 4:
            return Grid(pts, lower, upper)


# ------------------------------------------------------------------ grid
def test_midpoint_weights():
    g = midpoint_grid(10)
    np.testing.assert_allclose(g.weights[1:-1], 0.1, atol=1e-15)
    assert g.weights[0] == pytest.approx(3 / 40) and g.weights[-1] == pytest.approx(3 / 40)


def test_single_point_grid():
    g = build_grid([0.5], (0.0, 1.0))
    assert g.weights.tolist() == [0.5]


@given(st.integers(1, 30), st.floats(-5, 5), st.floats(0.5, 10))
def test_weights_telescope(p0, lower, width):
    g = random_grid(np.random.default_rng(p0), p0, lower, lower + width)
    expected = (g.points[-1] + g.upper - g.points[0] - g.lower) / 2
    assert g.weights.sum() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize(
    "points, ends",
    [([0.2, 0.1, 0.5], (0, 1)), ([0.2, 0.2, 0.5], (0, 1)), ([0.0, 0.5], (0, 1)), ([0.5, 1.2], (0, 1))],
)
def test_grid_rejects_bad_points(points, ends):
    with pytest.raises(ValueError):
        build_grid(points, ends)


def test_quasi_uniformity_constant_and_warning():
    assert midpoint_grid(12).quasi_uniformity == pytest.approx(4 / 3)
    with pytest.warns(QuasiUniformityWarning):
        build_grid([0.001, 0.002, 0.5, 0.999], (0.0, 1.0))


# --------------------------------------------------------------- matrices
def test_rejects_other_orders_and_tiny_grids():
    with pytest.raises(ValueError):
        SplineSystem(midpoint_grid(8), m=3)
    with pytest.raises(ValueError):
        SplineSystem(midpoint_grid(2))


def test_omega_annihilates_linear():
    s = SplineSystem(random_grid(np.random.default_rng(0), 9))
    np.testing.assert_allclose(s.omega @ s.G, 0.0, atol=1e-8)
    b = s.G @ np.array([0.3, -1.7])
    np.testing.assert_allclose(s.omega @ b, 0.0, atol=1e-8)


def test_t_squared_roughness_frozen():
    s = SplineSystem(midpoint_grid(12))
    b = s.grid.points**2
    assert b @ s.omega @ b == pytest.approx(T_SQUARED_ROUGHNESS_12, rel=1e-12)


def test_t_squared_roughness_tends_to_four():
    # the natural end conditions cost O(1/p0) of the limiting value 4 |T|
    gaps = []
    for p0 in (12, 24, 48, 96):
        s = SplineSystem(midpoint_grid(p0))
        b = s.grid.points**2
        gaps.append(4.0 - b @ s.omega @ b)
    assert all(g > 0 for g in gaps)
    np.testing.assert_allclose(np.array(gaps[:-1]) / np.array(gaps[1:]), 2.0, rtol=1e-6)


@given(st.integers(4, 25), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_roughness_matches_direct_integration(p0, seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, p0)
    b = rng.standard_normal(p0)
    s = SplineSystem(g)
    q = b @ s.omega @ b
    assert q >= 0
    assert q == pytest.approx(oracle_roughness(g.points, b), rel=1e-8, abs=1e-12)
    assert np.abs(s.omega - s.omega.T).max() < 1e-12


def test_roughness_against_scipy_second_derivative():
    rng = np.random.default_rng(3)
    g = random_grid(rng, 11)
    b = rng.standard_normal(11)
    cs = CubicSpline(g.points, b, bc_type="natural")
    x, w = gauss_legendre_nodes(g.points)
    assert b @ roughness_matrix(g) @ b == pytest.approx(float(w @ cs(x, 2) ** 2), rel=1e-10)


def test_projector_properties():
    s = SplineSystem(random_grid(np.random.default_rng(4), 10))
    np.testing.assert_allclose(s.P @ s.P, s.P, atol=1e-10)
    np.testing.assert_allclose(s.P @ s.G, s.G, atol=1e-10)
    np.testing.assert_allclose((np.eye(10) - s.P) @ s.G, 0.0, atol=1e-10)


def test_penalty_matrix_identities():
    s = SplineSystem(random_grid(np.random.default_rng(5), 13))
    a = penalty_matrix(s)
    np.testing.assert_allclose(a, a.T, atol=1e-14)
    np.testing.assert_allclose(a, s.omega + s.P.T @ s.delta @ s.P, atol=1e-10)
    np.testing.assert_allclose(a, s.omega + s.delta @ s.P, atol=1e-10)
    u = s.G @ np.array([1.2, -0.4])
    # omega's entries grow like 1/h^3, so omega u = 0 holds only to roundoff
    assert u @ a @ u == pytest.approx(u @ s.delta @ u, rel=1e-8)
    assert np.linalg.eigvalsh(a).min() > 0


def penalty_eigen_band(p0s):
    return np.array([np.linalg.eigvalsh(SplineSystem(midpoint_grid(p)).A).min() * p for p in p0s])


def test_penalty_lower_bound_band():
    band = penalty_eigen_band([8, 16, 32, 64])
    assert band.min() > 0 and band.max() / band.min() < 10


# ------------------------------------------------------------ evaluation
def test_eval_constant_fibers():
    s = SplineSystem(midpoint_grid(7))
    theta = np.broadcast_to(np.arange(6.0).reshape(1, 2, 3), (7, 2, 3))
    out = eval_coefficient(theta, np.linspace(0, 1, 11), s)
    np.testing.assert_allclose(out, np.broadcast_to(theta[0], (11, 2, 3)), atol=1e-12)


def test_eval_reproduces_knots():
    rng = np.random.default_rng(6)
    s = SplineSystem(random_grid(rng, 9))
    theta = rng.standard_normal((9, 3, 2))
    np.testing.assert_allclose(s.eval_coefficient(theta, s.grid.points), theta, atol=1e-12)


def test_eval_midpoints_against_oracle():
    rng = np.random.default_rng(7)
    g = random_grid(rng, 8)
    s = SplineSystem(g)
    theta = rng.standard_normal((8, 4))
    mids = (g.points[:-1] + g.points[1:]) / 2
    out = s.eval_coefficient(theta, mids)
    for k in range(4):
        expected = [oracle_eval(g.points, theta[:, k], x) for x in mids]
        np.testing.assert_allclose(out[:, k], expected, atol=1e-12)


def test_eval_extends_linearly_and_checks_domain():
    rng = np.random.default_rng(8)
    s = SplineSystem(midpoint_grid(6))
    b = rng.standard_normal(6)
    cs = CubicSpline(s.grid.points, b, bc_type="natural")
    t0, t1 = s.grid.points[[0, -1]]
    x = np.array([0.0, 0.03, 0.97, 1.0])
    tangent = np.where(x < 0.5, cs(t0) + cs(t0, 1) * (x - t0), cs(t1) + cs(t1, 1) * (x - t1))
    np.testing.assert_allclose(s.basis(x) @ b, tangent, atol=1e-12)
    with pytest.raises(ValueError):
        s.basis([1.2])


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_eval_linear_in_theta(seed):
    rng = np.random.default_rng(seed)
    s = SplineSystem(midpoint_grid(6))
    a, b = rng.standard_normal((2, 6, 3))
    c = rng.standard_normal()
    x = rng.uniform(0, 1, 5)
    np.testing.assert_allclose(
        s.eval_coefficient(a + c * b, x), s.eval_coefficient(a, x) + c * s.eval_coefficient(b, x), atol=1e-12
    )


# ----------------------------------------------------------------- gram
def test_l2_gram_properties():
    rng = np.random.default_rng(9)
    s = SplineSystem(random_grid(rng, 10, 0.0, 2.0))
    o = l2_gram(s)
    np.testing.assert_allclose(o, o.T, atol=1e-14)
    assert np.linalg.eigvalsh(o).min() > -1e-12
    theta = rng.standard_normal((10, 3))
    assert s.l2_distance2(theta, theta) == 0.0
    c = 1.7
    assert s.l2_distance2(np.full((10, 1), c), np.zeros((10, 1))) == pytest.approx(c**2 * 2.0, rel=1e-10)


def test_l2_gram_matches_fine_quadrature():
    rng = np.random.default_rng(10)
    s = SplineSystem(midpoint_grid(7))
    b = rng.standard_normal(7)
    edges = np.linspace(0, 1, 400)
    x, w = gauss_legendre_nodes(np.unique(np.concatenate([edges, s.grid.points])))
    assert b @ s.omega0 @ b == pytest.approx(float(w @ (s.basis(x) @ b) ** 2), rel=1e-12)


# --------------------------------------------------------------- penalty
def penalty_brute_force_errors(trials=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        p0 = int(rng.integers(4, 16))
        g = random_grid(rng, p0, 0.0, float(rng.uniform(0.5, 3.0)))
        theta = rng.standard_normal((p0,) + tuple(rng.integers(1, 4, size=2)))
        brute = oracle_penalty(g, theta)
        out.append(abs(penalty_value(theta, SplineSystem(g)) - brute) / brute)
    return np.array(out)


def test_penalty_value_equals_two_summands():
    assert penalty_brute_force_errors().max() < 1e-8


def test_penalty_value_zero_scaling_positive():
    rng = np.random.default_rng(11)
    s = SplineSystem(midpoint_grid(8))
    theta = rng.standard_normal((8, 2, 2))
    assert penalty_value(np.zeros_like(theta), s) == 0.0
    assert penalty_value(theta, s) > 0
    assert penalty_value(3 * theta, s) == pytest.approx(9 * penalty_value(theta, s), rel=1e-12)
    with pytest.raises(ValueError):
        penalty_value(np.zeros((7, 2)), s)


@pytest.mark.parametrize("p0", [8, 16, 32, 64, 128])
def test_penalty_cholesky(p0):
    np.linalg.cholesky(SplineSystem(midpoint_grid(p0)).A)
