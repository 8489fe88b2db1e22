import numpy as np
import pytest

from roughflow.fields import (
    GrowthReport,
    MollifierContractError,
    MollifierSpec,
    Piece,
    RoughDrift,
    SmoothVectorField,
    UnboundedDivergenceError,
    constant_field,
    fd_jacobian,
    growth_report,
    linear_field,
    mollified_divergence_bound,
    mollify_drift,
    zero_field,
)
from roughflow.scenarios import get_scenario


def catalog_smooth_fields():
    out = [zero_field(2), constant_field([0.5, 0.0]), linear_field([[-0.5, 0.3], [-0.2, -0.4]])]
    for name in ("smooth-nonlinear",):
        scn = get_scenario(name)
        out.extend(scn.fields)
        out.append(scn.drift)
    return out


@pytest.mark.parametrize("f", catalog_smooth_fields(), ids=lambda f: f.name or "anon")
def test_divergence_is_trace_of_jacobian(f, rng):
    x = rng.uniform(-2, 2, (200, f.dim))
    trace = np.einsum("...ii->...", f.jacobian(x))
    assert np.max(np.abs(f.divergence(x) - trace)) <= 1e-12


@pytest.mark.parametrize("f", catalog_smooth_fields(), ids=lambda f: f.name or "anon")
def test_finite_difference_jacobian_matches_analytic(f, rng):
    x = rng.uniform(-2, 2, (100, f.dim))
    fd = fd_jacobian(f.value, x, step=1e-5)
    scale = np.maximum(np.linalg.norm(f.jacobian(x), axis=(-2, -1)), 1.0)
    err = np.linalg.norm(fd - f.jacobian(x), axis=(-2, -1)) / scale
    assert err.max() <= 1e-6


def test_hessian_matches_finite_difference_of_jacobian(rng):
    scn = get_scenario("smooth-nonlinear")
    for f in (*scn.fields, scn.drift):
        x = rng.uniform(-1.5, 1.5, (50, 2))
        step = 1e-5
        for l in range(2):
            e = np.zeros(2)
            e[l] = step
            fd = (f.jacobian(x + e) - f.jacobian(x - e)) / (2 * step)
            assert np.max(np.abs(fd - f.hessian(x)[..., :, :, l])) <= 1e-5


def test_bounded_fields_respect_bound_constants(rng):
    scn = get_scenario("smooth-nonlinear")
    f = scn.fields[0]
    assert f.regularity_tag == "Cb3plus"
    x = rng.uniform(-8, 8, (500, 2))
    assert np.max(np.linalg.norm(f.value(x), axis=-1)) <= f.bound_consts[0] + 1e-12
    assert np.max(np.linalg.norm(f.jacobian(x), axis=(-2, -1))) <= f.bound_consts[1] + 1e-12


# ---------------------------------------------------------------------------
# Mollifier


def test_kernel_has_unit_mass():
    spec = MollifierSpec(dim=2)
    assert abs(spec.kernel_mass(points_per_axis=101) - 1.0) <= 1e-6
    spec1 = MollifierSpec(dim=1)
    assert abs(spec1.kernel_mass(points_per_axis=401) - 1.0) <= 1e-6


def test_cutoff_profile_exact_plateaus():
    spec = MollifierSpec(dim=2)
    s = np.array([0.0, 0.3, 1.0])
    assert np.all(spec.cutoff_profile(s) == 1.0)
    s2 = np.array([2.0, 2.5, 10.0])
    assert np.all(spec.cutoff_profile(s2) == 0.0)
    # strictly interior in exact arithmetic; floats saturate near the edges
    mid = spec.cutoff_profile(np.linspace(1.2, 1.8, 31))
    assert np.all((mid > 0) & (mid < 1))
    assert np.all(np.diff(mid) < 0)


def _sign_drift_1d():
    def value(x):
        return np.sign(x)

    return RoughDrift(
        dim=1,
        value=value,
        pieces=(
            Piece(lambda x: x[..., 0] < 0, lambda x: np.full_like(x, -1.0)),
            Piece(lambda x: x[..., 0] >= 0, lambda x: np.ones_like(x)),
        ),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(1.0, 0.5),
        class_tag="BVloc",
        div_bound=0.0,
        name="sign-1d",
    )


def test_mollify_zero_drift_is_zero():
    zero = RoughDrift(
        dim=2,
        value=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        pieces=(),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(0.0, 0.5),
        class_tag="Smooth",
        div_bound=0.0,
        name="zero",
    )
    for n in (1, 4):
        f = mollify_drift(zero, n)
        x = np.random.default_rng(0).uniform(-3, 3, (40, 2))
        assert np.all(f.value(x) == 0.0)


def test_mollify_constant_inside_cutoff_plateau(rng):
    c = np.array([0.7, -0.2])
    drift = RoughDrift(
        dim=2,
        value=lambda x: np.broadcast_to(c, np.shape(x)).copy(),
        pieces=(),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(1.0, 0.5),
        class_tag="Smooth",
        div_bound=0.0,
        name="const",
    )
    n = 4
    f = mollify_drift(drift, n)
    x = rng.uniform(-(n - 1), n - 1, (60, 2))
    x = x[np.linalg.norm(x, axis=-1) <= n - 1]
    # discrete kernel weights are normalized, so constants are exact
    assert np.max(np.abs(f.value(x) - c)) <= 1e-14


def test_mollify_sign_drift_away_from_jump():
    # oracle: direct fine quadrature of the convolution over the kernel support
    drift = _sign_drift_1d()
    spec = MollifierSpec(dim=1)
    n = 4
    f = mollify_drift(drift, n, spec)
    x = np.array([[2.0]])
    got = float(f.value(x)[0, 0])

    ys = np.linspace(-0.25, 0.25, 20001)[:, None]
    kv = spec.kernel(ys * n) * n
    quad = np.trapezoid((np.sign(2.0 - ys[:, 0])) * kv, ys[:, 0])
    assert abs(quad - 1.0) <= 1e-9  # support never crosses the jump
    assert abs(got - 1.0) <= 1e-8


def test_mollify_rejects_bad_level_and_wide_kernel():
    drift = _sign_drift_1d()
    with pytest.raises(ValueError):
        mollify_drift(drift, 0)
    with pytest.raises(MollifierContractError):
        mollify_drift(drift, 2, MollifierSpec(dim=1, support_radius=1.5))


def test_mollification_error_halves_for_smooth_drift():
    # smooth drift: the smoothing error is quadratic in the kernel radius,
    # so doubling the level at least halves the sup deviation on a fixed grid
    def value(x):
        return np.sin(np.asarray(x, dtype=float))

    drift = RoughDrift(
        dim=2,
        value=value,
        pieces=(),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(1.0, 0.5),
        class_tag="Smooth",
        div_bound=2.0,
        name="sine",
    )
    grid = np.stack(
        np.meshgrid(np.linspace(-1, 1, 9), np.linspace(-1, 1, 9), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    errs = []
    for n in (4, 8, 16):
        f = mollify_drift(drift, n)
        errs.append(np.max(np.abs(f.value(grid) - value(grid))))
    assert errs[1] <= 0.5 * errs[0]
    assert errs[2] <= 0.5 * errs[1]


def test_cutoff_identity_inside_plateau():
    # inside the cutoff plateau the mollified value is the bare convolution
    drift = get_scenario("rotation-bv").drift
    spec = MollifierSpec(dim=2)
    n = 4
    f = mollify_drift(drift, n, spec)
    x = np.array([[0.5, 0.25], [1.0, -2.0]])
    c = spec.cutoff_profile(np.linalg.norm(x, axis=-1) / n)
    assert np.all(c == 1.0)
    # reconstruct the bare convolution with the same quadrature weights
    from roughflow.fields import _midpoint_nodes

    nodes, cellvol = _midpoint_nodes(2, 1.0 / n, spec.quadrature_points_per_axis)
    kv = spec.kernel(nodes * n) * n**2 * cellvol
    w = kv / kv.sum()
    conv = np.einsum("bqi,q->bi", drift.value(x[:, None, :] - nodes), w)
    assert np.array_equal(f.value(x), conv)


def test_mollified_divergence_bound_zero_drift():
    zero = RoughDrift(
        dim=2,
        value=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        pieces=(),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(0.0, 0.5),
        class_tag="Smooth",
        div_bound=0.0,
    )
    assert mollified_divergence_bound(zero) == 0.0


def test_mollified_divergence_bound_rotation_drift():
    drift = get_scenario("rotation-bv").drift
    # with unit growth constant and cutoff slope two, the bound is six
    scaled = RoughDrift(
        dim=2,
        value=drift.value,
        pieces=drift.pieces,
        divergence_density=drift.divergence_density,
        growth=(1.0, 0.5),
        class_tag="BVloc",
        div_bound=0.0,
    )
    bound = mollified_divergence_bound(scaled, cutoff_grad_sup=2.0)
    assert bound == 6.0
    axis = np.linspace(-2, 2, 41)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    for n in (2, 4, 8):
        f = mollify_drift(drift, n)
        div = f.divergence(grid)
        assert np.max(np.abs(div)) <= bound


def test_mollified_divergence_bound_requires_global_bound():
    drift = _sign_drift_1d()
    unbounded = RoughDrift(
        dim=1,
        value=drift.value,
        pieces=drift.pieces,
        divergence_density=drift.divergence_density,
        growth=(1.0, 0.5),
        class_tag="BVloc",
        div_bound=None,
    )
    with pytest.raises(UnboundedDivergenceError):
        mollified_divergence_bound(unbounded)


def test_divergence_bound_linear_drift_on_ball():
    B = np.array([[-0.5, 0.3], [-0.2, -0.4]])
    R = 5.0
    # |Bx| <= ||B|| |x| <= ||B||(1+R)(1+|x|^(1/2)) on the ball: analytic envelope
    C = np.linalg.norm(B, 2) * (1 + R)
    f = linear_field(B)
    rep = growth_report(f, C, 0.5, sample_count=2000, radius=R)
    assert rep.satisfied


# ---------------------------------------------------------------------------
# Growth reports


def test_growth_report_zero_field():
    rep = growth_report(zero_field(2), C=0.0, eps0=0.5, sample_count=100, radius=3.0)
    assert rep.max_ratio == 0.0 and rep.satisfied


def test_growth_report_saturating_field_ratio_below_one():
    # |x| (1+|x|)^(-1/2) <= (1 + |x|^(1/2)) for all x: ratio stays below one
    def value(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.sqrt(1.0 + r)

    class F:
        dim = 2

        @staticmethod
        def value(x):
            return value(x)

    rep = growth_report(F, C=1.0, eps0=0.5, sample_count=5000, radius=50.0)
    assert rep.satisfied


def test_growth_report_linear_field_grid_oracle(rng):
    B = np.array([[0.7, 0.0], [0.0, 0.7]])
    f = linear_field(B)
    radius = 10.0
    rep = growth_report(f, C=np.inf, eps0=0.5, sample_count=4000, radius=radius, seed=5)
    # grid maximization oracle for the exact envelope of |Bx| / (1+|x|^(1/2))
    rr = np.linspace(1e-6, radius, 20001)
    oracle = np.max(0.7 * rr / (1.0 + np.sqrt(rr)))
    assert rep.max_ratio <= oracle + 1e-9
    assert rep.max_ratio >= 0.9 * oracle


def test_rough_drift_growth_envelopes():
    for name in ("rotation-bv", "sobolev-log"):
        drift = get_scenario(name).drift
        C, eps0 = drift.growth
        rep = growth_report(drift, C, eps0, sample_count=4000, radius=20.0)
        assert rep.satisfied, name


def test_descriptors_are_json_friendly():
    import json

    for name in ("additive-linear", "rotation-bv", "sobolev-log"):
        desc = get_scenario(name).descriptor()
        json.dumps(desc)
        assert desc["name"] == name
