import numpy as np
import pytest

from roughflow.brownian import refine, sample_path
from roughflow.decomposition import ball_grid
from roughflow.fields import constant_field, fd_gradient, fd_jacobian, linear_field, zero_field
from roughflow.flow_analysis import inverse_flow
from roughflow.scenarios import get_scenario, tanh_field_1d
from roughflow.sde_core import BoxGrid, DiffusionChart
from roughflow.transport import (
    MissingHessianError,
    TestFunction,
    bump_theta,
    density_evolution_check,
    indicator_theta,
    ito_weak_residual,
    quadratic_theta,
    random_transport_check,
    representation_solution,
)


def test_bump_vanishes_outside_support():
    tf = TestFunction((0.5, -0.2), 0.8, 2.0)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3, 3, (500, 2))
    outside = np.linalg.norm(pts - np.array([0.5, -0.2]), axis=-1) >= 0.8
    assert np.all(tf.value(pts[outside]) == 0.0)
    assert np.all(tf.gradient(pts[outside]) == 0.0)
    assert np.all(tf.hessian(pts[outside]) == 0.0)


def test_bump_gradient_matches_finite_differences():
    tf = TestFunction((0.0, 0.0), 1.0, 1.5)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.9, 0.9, (200, 2))
    pts = pts[np.linalg.norm(pts, axis=-1) < 0.95]
    fd = fd_gradient(tf.value, pts, step=1e-6)
    scale = np.maximum(np.linalg.norm(tf.gradient(pts), axis=-1), 1.0)
    assert np.max(np.linalg.norm(fd - tf.gradient(pts), axis=-1) / scale) <= 1e-6


def test_bump_hessian_matches_finite_differences():
    tf = TestFunction((0.1, 0.0), 0.9, 1.0)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.5, 0.5, (100, 2)) + np.array([0.1, 0.0])
    fd = fd_jacobian(tf.gradient, pts, step=1e-6)
    assert np.max(np.abs(fd - tf.hessian(pts))) <= 1e-5


def test_support_quadrature_integrates_bump():
    tf = TestFunction((0.0, 0.0), 1.0, 1.0)
    pts, vol = tf.support_quadrature(65)
    got = float(np.sum(tf.value(pts)) * vol)
    # polar closed form: 2 pi int_0^1 (1-s^2)^3 s ds = pi/4
    assert abs(got - np.pi / 4.0) <= 2e-3


# ---------------------------------------------------------------------------
# Representation solution


def test_constants_are_transported_exactly(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.0, 5)
    pts = np.array([[0.3, 0.1], [-0.4, 0.2]])
    inv = inverse_flow(pts, np.ones(2), grid, short_path, [sigma_field], zero_field(2))
    theta = representation_solution(lambda x: np.full(x.shape[:-1], 3.5), inv, pts)
    assert np.all(theta == 3.5)


def test_additive_zero_drift_shifts_initial_value(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.5, 5)
    pts, _, _ = ball_grid(2, 1.0, 5)
    inv = inverse_flow(pts, np.ones(len(pts)), grid, short_path, [sigma_field], zero_field(2))
    theta0 = bump_theta((0.0, 0.0), 1.5)
    got = representation_solution(theta0, inv, pts)
    w = short_path.cumulative()
    sigma_vec = sigma_field.value(np.zeros(2))
    expect = theta0(pts - sigma_vec * w[-1, 0])
    assert np.max(np.abs(got - expect)) <= 1e-12


def test_contraction_inverse_expands_argument():
    path = sample_path(0, 0, 1.0, 2.0**-6)
    grid = BoxGrid.cube(2, 3.0, 5)
    pts, _, _ = ball_grid(2, 0.8, 5)
    drift = linear_field(-np.eye(2))
    inv = inverse_flow(pts, np.ones(len(pts)), grid, path, [], drift)
    theta0 = quadratic_theta()
    got = representation_solution(theta0, inv, pts)
    expect = theta0(pts * np.exp(1.0))
    assert np.max(np.abs(got - expect) / np.abs(expect)) <= 1e-3


def test_representation_range_cannot_grow(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.5, 5)
    pts, _, _ = ball_grid(2, 1.0, 7)
    inv = inverse_flow(pts, np.ones(len(pts)), grid, short_path, [sigma_field], zero_field(2))
    theta0 = indicator_theta((0.2, 0.0), 0.7)
    got = representation_solution(theta0, inv, pts)
    assert set(np.unique(got)).issubset({0.0, 1.0})


def test_representation_requires_stored_node(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.0, 5)
    pts = np.array([[0.3, 0.1]])
    inv = inverse_flow(pts, np.ones(1), grid, short_path, [sigma_field], zero_field(2))
    with pytest.raises(KeyError):
        representation_solution(quadratic_theta(), inv, np.array([9.9, 9.9]))


# ---------------------------------------------------------------------------
# Weak residuals


def test_weak_residual_frozen_dynamics_is_exactly_zero():
    path = sample_path(0, 1, 0.5, 0.125)
    tf = TestFunction((0.0, 0.0), 1.2)
    res = ito_weak_residual(
        bump_theta((0.0, 0.0), 1.0),
        tf,
        [zero_field(2)],
        zero_field(2),
        [path],
        source_box=BoxGrid.cube(2, 2.0, 21),
    )
    assert np.all(res.residuals == 0.0)
    assert np.all(res.residuals_alt == 0.0)


def test_weak_residual_missing_hessian_raises():
    from roughflow.fields import SmoothVectorField

    bare = SmoothVectorField(
        dim=2,
        value=lambda x: np.asarray(x, dtype=float),
        jacobian=lambda x: np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy(),
        name="bare-linear",
    )
    path = sample_path(0, 1, 0.25, 0.125)
    tf = TestFunction((0.0, 0.0), 1.0)
    with pytest.raises(MissingHessianError):
        ito_weak_residual(
            quadratic_theta(), tf, [bare], None, [path],
            source_box=BoxGrid.cube(2, 1.5, 11),
        )


def test_weak_residual_deterministic_transport_halves():
    scn = get_scenario("ode-only")
    tf = TestFunction((0.0, 0.0), 1.2)
    theta0 = bump_theta((0.0, 0.0), 1.0)
    finals = []
    for lvl in range(2):
        h = 2.0**-5 / 2**lvl
        nodes = 21 * 2**lvl + 1
        path = sample_path(0, 0, 0.5, h)
        res = ito_weak_residual(
            theta0, tf, scn.fields, scn.drift, [path],
            source_box=BoxGrid.cube(2, 2.0, nodes),
        )
        finals.append(res.final_mean())
    assert finals[0] <= 5e-2
    assert finals[1] <= 0.6 * finals[0]


def test_weak_residual_additive_noise_ensemble():
    # the left-point form carries an order-1/2 pathwise remainder, so its
    # residual halves when the step is quartered; the midpoint form halves
    # per step halving
    tf = TestFunction((0.0, 0.0), 1.2)
    theta0 = bump_theta((0.0, 0.0), 1.0)
    sig = constant_field([0.5, 0.0])
    finals, finals_alt = [], []
    for lvl in range(2):
        h = 2.0**-5 / 4**lvl
        nodes = 21 * 2**lvl + 1
        paths = [sample_path(s, 1, 0.5, h) for s in range(8)]
        res = ito_weak_residual(
            theta0, tf, [sig], None, paths, source_box=BoxGrid.cube(2, 2.2, nodes)
        )
        finals.append(res.final_mean())
        finals_alt.append(float(res.residuals_alt[:, -1].mean()))
    assert finals[0] <= 5e-2
    assert finals[1] <= 0.75 * finals[0]
    assert finals_alt[1] <= 0.5 * finals_alt[0]


def test_ito_and_symmetric_forms_agree_within_noise():
    tf = TestFunction((0.0, 0.0), 1.2)
    theta0 = bump_theta((0.0, 0.0), 1.0)
    sig = constant_field([0.5, 0.0])
    paths = [sample_path(s, 1, 0.5, 2.0**-6) for s in range(8)]
    res = ito_weak_residual(
        theta0, tf, [sig], None, paths, source_box=BoxGrid.cube(2, 2.2, 31)
    )
    # the two right-hand sides are paired estimates of the same functional
    gaps = np.asarray(res.meta["rhs_form_gap"])
    se = gaps.std(ddof=1) / np.sqrt(len(gaps))
    assert abs(gaps.mean()) <= 3.0 * se + 10.0 * paths[0].h


def test_random_transport_frozen_dynamics_zero():
    path = sample_path(0, 1, 0.5, 0.125)
    chart = DiffusionChart(BoxGrid.cube(2, 2.0, 5), path, [zero_field(2)])
    tf = TestFunction((0.0, 0.0), 1.2)
    res = random_transport_check(
        bump_theta((0.0, 0.0), 1.0), tf, chart, zero_field(2),
        source_box=BoxGrid.cube(2, 2.0, 21),
    )
    assert np.all(res.residuals == 0.0)


def test_random_transport_deterministic_halves():
    scn = get_scenario("ode-only")
    tf = TestFunction((0.0, 0.0), 1.2)
    theta0 = bump_theta((0.0, 0.0), 1.0)
    finals = []
    for lvl in range(2):
        h = 2.0**-5 / 2**lvl
        nodes = 21 * 2**lvl + 1
        path = sample_path(0, 0, 0.5, h)
        chart = DiffusionChart(BoxGrid.cube(2, 2.0, 5), path, [])
        res = random_transport_check(
            theta0, tf, chart, scn.drift, source_box=BoxGrid.cube(2, 2.0, nodes)
        )
        finals.append(res.final_mean())
    assert finals[0] <= 5e-2
    assert finals[1] <= 0.6 * finals[0]


def test_random_transport_additive_linear():
    scn = get_scenario("additive-linear")
    tf = TestFunction((0.0, 0.0), 1.2)
    theta0 = bump_theta((0.0, 0.0), 1.0)
    path = sample_path(3, 1, 0.5, 2.0**-6)
    chart = DiffusionChart(BoxGrid.cube(2, 2.5, 5), path, scn.fields)
    res = random_transport_check(
        theta0, tf, chart, scn.drift, source_box=BoxGrid.cube(2, 2.2, 41)
    )
    assert res.final_mean() <= 5e-2


def test_density_evolution_divergence_free_small():
    sig = constant_field([0.5, 0.0])
    path = sample_path(1, 1, 0.5, 2.0**-6)
    chart = DiffusionChart(BoxGrid.cube(2, 2.5, 5), path, [sig])
    tf = TestFunction((0.0, 0.0), 1.2)
    rep = density_evolution_check(tf, chart, source_box=BoxGrid.cube(2, 2.2, 41))
    assert rep["final_residual"] <= 1e-3


def test_density_evolution_tanh_crosscheck_and_halving():
    f = tanh_field_1d(0.8)
    tf = TestFunction((0.0,), 1.0)
    finals, crosses = [], []
    base = sample_path(2, 1, 0.5, 2.0**-6)
    for lvl, path in enumerate((base, refine(base))):
        nodes = 41 * 2**lvl + 1
        chart = DiffusionChart(BoxGrid.cube(1, 3.0, 257), path, [f])
        rep = density_evolution_check(
            tf, chart, source_box=BoxGrid.cube(1, 2.5, nodes),
            crosscheck_points=np.array([[0.2], [-0.4], [0.6]]),
        )
        finals.append(rep["final_residual"])
        crosses.append(rep["crosscheck"]["max_rel_difference"])
    assert crosses[0] <= 20 * base.h
    assert crosses[1] <= 0.75 * crosses[0]
    assert finals[0] <= 5e-2
    assert finals[1] <= 0.75 * finals[0]
