import numpy as np
import pytest
from scipy.linalg import expm

from roughflow.brownian import refine, reverse, sample_path
from roughflow.fields import SmoothVectorField, constant_field, linear_field, zero_field
from roughflow.scenarios import get_scenario, tanh_field_1d
from roughflow.sde_core import (
    BoxGrid,
    ChartExhaustedError,
    DiffusionChart,
    FlowTrajectory,
    NewtonNoConvergenceError,
    NonFiniteStateError,
    OutOfChartError,
    SingularJacobianError,
    diffusion_flow,
    direct_flow,
    heun_step,
    integrate_flow,
    invert_flow_point,
)


def geometric_1d():
    return SmoothVectorField(
        dim=1,
        value=lambda x: np.asarray(x, dtype=float),
        jacobian=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)),
        name="geometric",
    )


def test_heun_frozen_dynamics_is_identity():
    s, J = heun_step(np.array([1.0, -2.0]), np.eye(2), [zero_field(2)], np.array([0.4]), None, 0.1)
    assert np.array_equal(s, np.array([1.0, -2.0]))
    assert np.array_equal(J, np.eye(2))


def test_heun_additive_noise_is_exact():
    sig = constant_field([0.7, 0.0])
    x = np.array([0.3, 0.4])
    s, J = heun_step(x, np.eye(2), [sig], np.array([0.25]), None, 0.05)
    assert np.allclose(s, x + np.array([0.7 * 0.25, 0.0]), rtol=0, atol=0)
    assert np.array_equal(J, np.eye(2))


def test_heun_geometric_matches_second_order_taylor():
    z = 0.3
    s, J = heun_step(np.array([2.0]), np.eye(1), [geometric_1d()], np.array([z]), None, 0.01)
    assert np.isclose(s[0], 2.0 * (1 + z + z * z / 2), rtol=0, atol=1e-14)
    assert np.isclose(J[0, 0], 1 + z + z * z / 2, rtol=0, atol=1e-14)
    # one Heun step approximates the exponential map to cubic order
    assert abs(s[0] - 2.0 * np.exp(z)) <= 2.0 * abs(z) ** 3


def test_heun_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        heun_step(np.zeros(1), None, [geometric_1d()], np.array([0.1]), None, 0.0)


def test_nonfinite_state_is_reported():
    cubic = SmoothVectorField(
        dim=1,
        value=lambda x: np.asarray(x, dtype=float) ** 3,
        jacobian=lambda x: 3.0 * np.asarray(x[..., 0], dtype=float)[..., None, None] ** 2,
        name="cubic",
    )
    path = sample_path(0, 1, 8.0, 1.0)
    with pytest.raises((NonFiniteStateError, FloatingPointError)):
        direct_flow(np.array([3.0]), path, [], cubic)


def test_diffusion_flow_additive_closed_form(short_path, sigma_field):
    x = np.array([0.2, -0.1])
    tr = diffusion_flow(x, short_path, [sigma_field])
    w = short_path.cumulative()
    sigma_vec = sigma_field.value(np.zeros(2))
    expect = x + w[:, [0]] * sigma_vec
    assert np.max(np.abs(tr.states - expect)) <= 1e-14
    assert np.max(np.abs(tr.jacobians - np.eye(2))) == 0.0
    assert np.all(tr.dets == 1.0)
    assert tr.inversion_residual <= 1e-8


def test_flow_without_noise_is_identity():
    path = sample_path(1, 0, 1.0, 0.25)
    tr = diffusion_flow(np.array([1.5, -0.5]), path, [])
    assert np.all(tr.states == np.array([1.5, -0.5]))
    assert np.all(tr.dets == 1.0)


def test_trajectory_invariants_at_time_zero(short_path):
    scn = get_scenario("smooth-nonlinear")
    tr = diffusion_flow(np.array([0.1, 0.2]), short_path, scn.fields)
    assert np.array_equal(tr.jacobians[0], np.eye(2))
    assert np.array_equal(tr.inverses[0], np.eye(2))
    assert tr.dets[0] == 1.0
    assert np.all(np.sign(tr.dets) == np.sign(tr.dets[0]))
    assert tr.inversion_residual <= 1e-8


def test_liouville_identity_tanh_1d():
    # det of the variational Jacobian against the exponential of the
    # divergence quadrature along the path, with first-order decay in h
    f = tanh_field_1d(0.8)
    path = sample_path(5, 1, 1.0, 2.0**-7)
    rels = []
    for p in (path, refine(path)):
        tr = diffusion_flow(np.array([0.3]), p, [f])
        rel = np.max(np.abs(tr.dets - np.exp(tr.liouville_log)) / np.abs(tr.dets))
        rels.append(rel)
    assert rels[0] <= 5.0 * path.h
    assert rels[1] <= 0.75 * rels[0]


def test_direct_flow_zero_drift_matches_diffusion(short_path, sigma_field):
    x = np.array([0.4, 0.1])
    a = diffusion_flow(x, short_path, [sigma_field])
    b = direct_flow(x, short_path, [sigma_field], zero_field(2))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.jacobians, b.jacobians)


def variation_of_constants(x, B, sigma_vec, path):
    """Midpoint-discretized closed form for additive noise and linear drift."""
    t = path.times
    out = np.empty((len(t), len(x)))
    out[0] = x
    for k in range(1, len(t)):
        acc = expm(B * t[k]) @ x
        for j in range(k):
            s_mid = t[j] + path.h / 2.0
            acc = acc + expm(B * (t[k] - s_mid)) @ (sigma_vec * path.increments[j])
        out[k] = acc
    return out


def test_direct_flow_matches_variation_of_constants(additive_scenario):
    path = sample_path(3, 1, 0.5, 2.0**-7)
    B = np.array(additive_scenario.drift.params["matrix"])
    sigma_vec = np.array(additive_scenario.fields[0].params["vector"])
    x = np.array([0.5, -0.3])
    tr = direct_flow(x, path, additive_scenario.fields, additive_scenario.drift, thin=16)
    oracle = variation_of_constants(x, B, sigma_vec, path)[::16]
    err = np.max(np.linalg.norm(tr.states - oracle, axis=-1))
    assert err <= 5.0 * path.h


def test_time_reversed_dynamics_return_to_start(additive_scenario):
    # running the negated dynamics on the negated reversed driver undoes the flow
    scn = get_scenario("smooth-nonlinear")
    x = np.array([0.2, -0.4])
    errs = []
    path = sample_path(13, 1, 0.5, 2.0**-6)
    for p in (path, refine(path)):
        fwd = direct_flow(x, p, scn.fields, scn.drift)
        rpath = reverse(p)
        from dataclasses import replace

        rneg = replace(rpath, increments=-rpath.increments, refinable=False)
        neg_drift = SmoothVectorField(
            dim=2,
            value=lambda y: -scn.drift.value(y),
            jacobian=lambda y: -scn.drift.jacobian(y),
            name="negated",
        )
        back = direct_flow(fwd.states[-1], rneg, scn.fields, neg_drift)
        errs.append(np.linalg.norm(back.states[-1] - x))
    assert errs[0] <= 10.0 * path.h
    assert errs[1] <= 0.75 * errs[0]


def test_strong_order_additive_linear(additive_scenario):
    # endpoint strong error against the coupled closed form on refined paths
    B = np.array(additive_scenario.drift.params["matrix"])
    sigma_vec = np.array(additive_scenario.fields[0].params["vector"])
    x = np.array([0.4, 0.2])
    errs = []
    hs = []
    for seed in range(4):
        path = sample_path(seed, 1, 1.0, 2.0**-5)
        errs_path = []
        for lvl in range(4):
            if lvl > 0:
                path = refine(path)
            tr = direct_flow(x, path, additive_scenario.fields, additive_scenario.drift,
                             thin=path.steps)
            oracle = variation_of_constants(x, B, sigma_vec, path)[-1]
            errs_path.append(np.linalg.norm(tr.states[-1] - oracle))
            if seed == 0:
                hs.append(path.h)
        errs.append(errs_path)
    mean_err = np.mean(errs, axis=0)
    slope, _ = np.polyfit(np.log2(hs), np.log2(mean_err), 1)
    assert slope >= 0.8


# ---------------------------------------------------------------------------
# Chart and inversion


def test_chart_interpolation_exact_for_additive(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.0, 5)
    chart = DiffusionChart(grid, short_path, [sigma_field])
    pts = np.random.default_rng(0).uniform(-1.5, 1.5, (20, 2))
    w = short_path.cumulative()
    sigma_vec = sigma_field.value(np.zeros(2))
    k = short_path.steps // 2
    assert np.allclose(chart.phi(float(k), pts), pts + sigma_vec * w[k, 0], rtol=0, atol=1e-13)
    assert np.allclose(chart.inverse_jacobian(float(k), pts), np.eye(2), rtol=0, atol=0)
    assert np.allclose(chart.div_inverse_jacobian(float(k), pts), 0.0, rtol=0, atol=0)


def test_chart_query_outside_box_raises(short_path, sigma_field):
    grid = BoxGrid.cube(2, 1.0, 5)
    chart = DiffusionChart(grid, short_path, [sigma_field])
    with pytest.raises(ChartExhaustedError):
        chart.phi(1.0, np.array([[5.0, 0.0]]))


def test_invert_point_time_zero_returns_query(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.0, 5)
    chart = DiffusionChart(grid, short_path, [sigma_field])
    y = np.array([0.3, -0.2])
    assert np.array_equal(chart.invert_point(0, y), y)


def test_invert_point_additive_explicit(short_path, sigma_field):
    grid = BoxGrid.cube(2, 2.0, 5)
    chart = DiffusionChart(grid, short_path, [sigma_field])
    w = short_path.cumulative()
    sigma_vec = sigma_field.value(np.zeros(2))
    y = np.array([0.3, -0.2])
    k = short_path.steps
    x = chart.invert_point(k, y)
    assert np.allclose(x, y - sigma_vec * w[k, 0], atol=1e-10)


def test_invert_point_smooth_nonlinear_residual():
    scn = get_scenario("smooth-nonlinear")
    path = sample_path(2, 1, 0.25, 2.0**-6)
    grid = BoxGrid.cube(2, 2.0, 9)
    chart = DiffusionChart(grid, path, scn.fields)
    rng = np.random.default_rng(1)
    ys = chart.reintegrate(rng.uniform(-1.0, 1.0, (100, 2)), path.steps)
    xs = chart.invert_point(path.steps, ys)
    back = chart.reintegrate(xs, path.steps)
    assert np.max(np.linalg.norm(back - ys, axis=-1)) <= 1e-8


def test_invert_point_outside_image_raises(short_path, sigma_field):
    grid = BoxGrid.cube(2, 1.0, 5)
    chart = DiffusionChart(grid, short_path, [sigma_field])
    with pytest.raises((OutOfChartError, NewtonNoConvergenceError)):
        chart.invert_point(short_path.steps, np.array([40.0, 40.0]))


def test_singular_jacobian_detected():
    # contracting drift at multiplier 1/2 per step per component drives
    # det J below the tolerance after twenty steps
    f = linear_field([[-4.0, 0.0], [0.0, -4.0]])
    path = sample_path(0, 0, 5.0, 0.25)
    with pytest.raises(SingularJacobianError):
        direct_flow(np.array([1.0, 1.0]), path, [], f)


def test_thinned_output_keeps_endpoint(short_path, sigma_field):
    tr = diffusion_flow(np.array([0.0, 0.0]), short_path, [sigma_field], thin=7)
    assert tr.times[0] == 0.0
    assert np.isclose(tr.times[-1], short_path.T)
    full = diffusion_flow(np.array([0.0, 0.0]), short_path, [sigma_field])
    assert np.allclose(tr.states[-1], full.states[-1], rtol=0, atol=0)
    # the divergence quadrature runs over every step regardless of thinning
    assert np.allclose(tr.liouville_log[-1], full.liouville_log[-1], rtol=0, atol=0)


def test_trajectory_csv(tmp_path, short_path, sigma_field):
    tr = diffusion_flow(np.array([0.1, 0.2]), short_path, [sigma_field], thin=8)
    fn = tmp_path / "traj.csv"
    tr.to_csv(fn)
    lines = fn.read_text().strip().splitlines()
    assert lines[0] == "t,x_1,x_2,J_11,J_12,J_21,J_22,det"
    assert len(lines) == 1 + len(tr.times)


def test_integrate_flow_validates_thin(short_path, sigma_field):
    with pytest.raises(ValueError):
        integrate_flow(np.zeros(2), short_path.increments, short_path.h, [sigma_field], thin=0)
