"""Factoring the SDE flow into a diffusion flow composed with a random ODE.

The drift seen by the ODE is the pull-back of the original drift through the
diffusion flow: the inverse Jacobian applied to the drift at the transported
point. The ODE flow is integrated by classical RK4 on the SDE time grid with
coefficients taken from per-step flow snapshots (linear interpolation in time
between steps), while the log-density of the flow accumulates the ODE drift's
divergence along each trajectory by trapezoidal quadrature on the same grid.

Per-(path, grid point) computations are independent; flow fields are
deterministic reductions over grid indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .brownian import BrownianPath
from .fields import RoughDrift, SmoothVectorField, fd_gradient, fd_jacobian
from .sde_core import (
    BoxGrid,
    DiffusionChart,
    chart_slices,
    integrate_flow,
    _ChartSlice,
)

Array = np.ndarray


@dataclass(frozen=True)
class ChartSpec:
    """A chart to be streamed slice by slice rather than stored."""

    grid: BoxGrid
    path: BrownianPath
    fields: tuple

    def slices(self):
        return chart_slices(self.grid, self.path, self.fields)


def _as_spec(source) -> ChartSpec:
    if isinstance(source, ChartSpec):
        return source
    if isinstance(source, DiffusionChart):
        return ChartSpec(source.grid, source.path, tuple(source.fields))
    raise TypeError(f"expected a chart or chart spec, got {type(source)!r}")


def _chart_slice_view(chart: DiffusionChart):
    for k in range(chart.path.steps + 1):
        yield _ChartSlice(
            k,
            chart.states[k],
            chart.K[k],
            chart.det[k],
            chart.div_K[k],
            chart.liouville_log[k],
        )


def _slices_of(source):
    if isinstance(source, DiffusionChart):
        return _chart_slice_view(source)
    return source.slices()


def _require_smooth_drift(drift) -> SmoothVectorField:
    if isinstance(drift, RoughDrift):
        raise ValueError(
            f"rough drift {drift.name!r} cannot drive the ODE directly; "
            "mollify it at an explicit level first"
        )
    return drift


class TransformedDrift:
    """The drift pulled back through the diffusion flow.

    value(t, x) is exactly the stored inverse Jacobian at (t, x) applied to
    the drift at the stored flow image of (t, x); divergence(t, x) is the
    two-term sum of the inverse-Jacobian column divergences paired with the
    drift at the image, plus the drift divergence at the image. Time is a
    fractional step index. Single-point evaluations are cached by (t, bytes);
    recompute() bypasses the cache and must agree bitwise.
    """

    def __init__(self, chart: DiffusionChart, drift: SmoothVectorField):
        self.chart = chart
        self.drift = _require_smooth_drift(drift)
        self._cache: dict = {}

    def _parts(self, tq: float, x: Array):
        phi = self.chart.phi(tq, x)
        K = self.chart.inverse_jacobian(tq, x)
        return phi, K

    def _compute(self, tq: float, x: Array) -> Array:
        phi, K = self._parts(tq, x)
        return np.einsum("...ij,...j->...i", K, self.drift.value(phi))

    def value(self, tq: float, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            key = (float(tq), x.tobytes())
            if key not in self._cache:
                self._cache[key] = self._compute(tq, x)
            return self._cache[key]
        return self._compute(tq, x)

    def recompute(self, tq: float, x: Array) -> Array:
        return self._compute(tq, np.asarray(x, dtype=float))

    def divergence(self, tq: float, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        phi = self.chart.phi(tq, x)
        div_K = self.chart.div_inverse_jacobian(tq, x)
        return np.einsum("...i,...i->...", div_K, self.drift.value(phi)) + (
            self.drift.divergence(phi)
        )


class ExactTransformedDrift:
    """Pulled-back drift evaluated by re-integration instead of chart lookup.

    Slower but free of interpolation error; used for derivative-level checks.
    """

    def __init__(self, chart: DiffusionChart, drift: SmoothVectorField):
        self.chart = chart
        self.drift = _require_smooth_drift(drift)

    def value(self, step: int, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        phi, J = self.chart.reintegrate(x, step, with_jacobian=True)
        K = np.linalg.inv(J)
        return np.einsum("...ij,...j->...i", K, self.drift.value(phi))

    def divergence(self, step: int, x: Array, fd_step: float = 1e-4) -> Array:
        x = np.asarray(x, dtype=float)
        phi, J = self.chart.reintegrate(x, step, with_jacobian=True)
        d = x.shape[-1]
        dK = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            _, Jp = self.chart.reintegrate(x + e, step, with_jacobian=True)
            _, Jm = self.chart.reintegrate(x - e, step, with_jacobian=True)
            dK.append((np.linalg.inv(Jp) - np.linalg.inv(Jm)) / (2 * fd_step))
        dK = np.stack(dK, axis=-3)  # (..., j, row, col)
        div_K = np.einsum("...jji->...i", dK)
        return np.einsum("...i,...i->...", div_K, self.drift.value(phi)) + (
            self.drift.divergence(phi)
        )


# ---------------------------------------------------------------------------
# The random ODE flow and its densities


@dataclass(frozen=True)
class FlowField:
    """Per-initial-point trajectories with quadrature weights and densities.

    log_rho accumulates the drift divergence along each trajectory, so
    rho() = exp(log_rho) is the density carried by the inverse flow and
    rho_tilde_at_images() = exp(-log_rho) is the push-forward density
    evaluated at the moving points.
    """

    grid: Array  # (G, d) initial points
    weights: Array  # (G,)
    times: Array  # (n_out,)
    step_indices: Array  # (n_out,)
    states: Array  # (n_out, G, d)
    log_rho: Array  # (n_out, G)
    h: float
    box: Optional[BoxGrid] = None

    def rho(self) -> Array:
        return np.exp(self.log_rho)

    def rho_tilde_at_images(self) -> Array:
        return np.exp(-self.log_rho)

    def row_for_step(self, step: int) -> int:
        hits = np.nonzero(self.step_indices == step)[0]
        if len(hits) == 0:
            raise KeyError(f"step {step} was not stored (thinned output)")
        return int(hits[0])

    def to_csv(self, filename) -> None:
        """Columns: t, initial point, transported point, density."""
        d = self.grid.shape[-1]
        rows = []
        rho = self.rho()
        for j, t in enumerate(self.times):
            block = np.hstack(
                [
                    np.full((len(self.grid), 1), t),
                    self.grid,
                    self.states[j],
                    rho[j][:, None],
                ]
            )
            rows.append(block)
        header = (
            "t,"
            + ",".join(f"x_{i + 1}" for i in range(d))
            + ","
            + ",".join(f"Y_{i + 1}" for i in range(d))
            + ",rho"
        )
        np.savetxt(filename, np.vstack(rows), delimiter=",", header=header, comments="")


def ball_grid(d: int, radius: float, nodes_per_axis: int, center=None):
    """Box grid nodes restricted to the ball, with midpoint-rule cell weights."""
    box = BoxGrid.cube(d, radius, nodes_per_axis, center)
    pts = box.points()
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    mask = np.linalg.norm(pts - c, axis=-1) <= radius + 1e-12
    cellvol = float(np.prod(box.spacing))
    return pts[mask], np.full(int(mask.sum()), cellvol), box


def lagrangian_flow(
    initial_points: Array,
    weights: Array,
    chart_source,
    drift: SmoothVectorField,
    *,
    negate_drift: bool = False,
    store_every: int = 1,
    box: Optional[BoxGrid] = None,
) -> FlowField:
    """RK4 solution of the random ODE on the SDE time grid, with log-density.

    chart_source supplies per-step flow snapshots (a stored chart or a
    streaming spec); coefficients within a step interpolate linearly between
    the two bracketing snapshots. The divergence quadrature (trapezoid) runs
    over every step regardless of output thinning.
    """
    drift = _require_smooth_drift(drift)
    sign = -1.0 if negate_drift else 1.0
    spec = _as_spec(chart_source)
    grid = spec.grid
    h = spec.path.h
    n_steps = spec.path.steps

    Y = np.asarray(initial_points, dtype=float).copy()
    logr = np.zeros(Y.shape[:-1])

    it = _slices_of(chart_source)
    cur = next(it)

    def b_at(theta, x, cur, nxt):
        if theta <= 0.0 or nxt is None:
            phi = grid.interpolate(cur.states, x)
            K = grid.interpolate(cur.K, x)
        elif theta >= 1.0:
            phi = grid.interpolate(nxt.states, x)
            K = grid.interpolate(nxt.K, x)
        else:
            phi = (1 - theta) * grid.interpolate(cur.states, x) + theta * grid.interpolate(nxt.states, x)
            K = (1 - theta) * grid.interpolate(cur.K, x) + theta * grid.interpolate(nxt.K, x)
        return sign * np.einsum("...ij,...j->...i", K, drift.value(phi))

    def div_at(sl, x):
        phi = grid.interpolate(sl.states, x)
        div_K = grid.interpolate(sl.div_K, x)
        total = np.einsum("...i,...i->...", div_K, drift.value(phi)) + drift.divergence(phi)
        return sign * total

    times = [0.0]
    steps_stored = [0]
    states = [Y.copy()]
    logs = [logr.copy()]

    div_left = div_at(cur, Y)
    for k in range(n_steps):
        nxt = next(it)
        k1 = b_at(0.0, Y, cur, nxt)
        k2 = b_at(0.5, Y + 0.5 * h * k1, cur, nxt)
        k3 = b_at(0.5, Y + 0.5 * h * k2, cur, nxt)
        k4 = b_at(1.0, Y + h * k3, cur, nxt)
        Y = Y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError("ODE state became non-finite")
        div_right = div_at(nxt, Y)
        logr = logr + 0.5 * h * (div_left + div_right)
        div_left = div_right
        cur = nxt
        if (k + 1) % store_every == 0 or k + 1 == n_steps:
            times.append((k + 1) * h)
            steps_stored.append(k + 1)
            states.append(Y.copy())
            logs.append(logr.copy())

    return FlowField(
        grid=np.asarray(initial_points, dtype=float),
        weights=np.asarray(weights, dtype=float),
        times=np.asarray(times),
        step_indices=np.asarray(steps_stored),
        states=np.stack(states),
        log_rho=np.stack(logs),
        h=h,
        box=box,
    )


def compose(
    chart_source,
    flow: FlowField,
    rows: Optional[Sequence[int]] = None,
) -> FlowField:
    """Compose the diffusion flow with the ODE flow: x -> flow_map(Y_t(x)).

    The flow map at off-grid points is obtained by re-integrating the
    diffusion equation from each transported point on the stored increments
    (exactness over interpolation smoothness). log_rho of the result adds the
    diffusion volume quadrature along the re-integrated trajectory, giving
    the log volume factor of the composed map.
    """
    spec = _as_spec(chart_source)
    if rows is None:
        rows = range(len(flow.times))
    rows = list(rows)
    times, steps, states, logs = [], [], [], []
    for j in rows:
        s = int(flow.step_indices[j])
        y = flow.states[j]
        if s == 0:
            x_img = y.copy()
            liou = np.zeros(y.shape[:-1])
        else:
            ens = integrate_flow(
                y, spec.path.increments[:s], spec.path.h, spec.fields,
                None, False, thin=s,
            )
            x_img = ens.states[-1]
            liou = ens.liouville_log[-1]
        times.append(flow.times[j])
        steps.append(s)
        states.append(x_img)
        logs.append(flow.log_rho[j] + liou)
    return FlowField(
        grid=flow.grid,
        weights=flow.weights,
        times=np.asarray(times),
        step_indices=np.asarray(steps),
        states=np.stack(states),
        log_rho=np.stack(logs),
        h=flow.h,
        box=flow.box,
    )


def invert_ode_flow(
    flow: FlowField,
    row: int,
    targets: Array,
    tol: float = 1e-9,
    max_iter: int = 60,
):
    """Solve Y_t(z) = target by Newton over the stored grid.

    The map and its Jacobian are taken from multilinear interpolation of the
    stored states and their grid finite differences, seeded at the nearest
    stored preimage. Requires the flow to have been computed on a box grid.
    """
    if flow.box is None:
        raise ValueError("inversion needs a flow computed on a box grid")
    box = flow.box
    full = box.points()
    if len(full) != len(flow.grid) or not np.allclose(full, flow.grid):
        raise ValueError("flow grid does not match its box grid")
    Yt = flow.states[row]
    jac_nodes = box.gradient_fields(Yt)  # (G, d, d): [node, dcoord, comp]
    jac_nodes = np.swapaxes(jac_nodes, -1, -2)  # rows = components
    targets = np.asarray(targets, dtype=float)
    single = targets.ndim == 1
    ys = targets[None, :] if single else targets

    d2 = np.sum((Yt[None, :, :] - ys[:, None, :]) ** 2, axis=-1)
    z = flow.grid[np.argmin(d2, axis=1)].copy()
    for _ in range(max_iter):
        fz = box.interpolate(Yt, z)
        r = fz - ys
        if np.max(np.linalg.norm(r, axis=-1)) <= tol:
            break
        Jz = box.interpolate(jac_nodes, z)
        z = z - np.linalg.solve(Jz, r[..., None])[..., 0]
        z = np.clip(z, box.lo, box.hi)
    return z[0] if single else z


def forward_density(
    flow: FlowField,
    chart_source,
    drift: SmoothVectorField,
    row: int,
    x: Array,
    *,
    negate_drift: bool = False,
) -> Array:
    """Density of the ODE flow's push-forward of volume, at points x.

    Resolves the preimage under the time-t map by grid Newton, then
    re-accumulates the divergence quadrature along the trajectory through
    the preimage and returns exp(-integral). At stored grid points this is
    the exact reciprocal of rho() there.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    z = invert_ode_flow(flow, row, xs)
    step = int(flow.step_indices[row])
    if step == 0:
        dens = np.ones(len(xs))
    else:
        sub = lagrangian_flow(
            z,
            np.ones(len(z)),
            _truncate_source(chart_source, step),
            drift,
            negate_drift=negate_drift,
            store_every=step,
        )
        dens = np.exp(-sub.log_rho[-1])
    return float(dens[0]) if single else dens


def _truncate_source(chart_source, step: int):
    spec = _as_spec(chart_source)
    if step == spec.path.steps:
        return chart_source
    from dataclasses import replace as dc_replace

    short = dc_replace(
        spec.path,
        T=step * spec.path.h,
        increments=spec.path.increments[:step],
        refinable=False,
    )
    return ChartSpec(spec.grid, short, spec.fields)


# ---------------------------------------------------------------------------
# Calculus identity checks


@dataclass(frozen=True)
class MapSnapshot:
    """A frozen diffeomorphism with value and Jacobian callables."""

    value: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]


def snapshot_of_chart(chart: DiffusionChart, step: int) -> MapSnapshot:
    """Exact (re-integration backed) snapshot of the diffusion flow at a step."""

    def value(x):
        return chart.reintegrate(np.asarray(x, dtype=float), step)

    def jacobian(x):
        _, J = chart.reintegrate(np.asarray(x, dtype=float), step, with_jacobian=True)
        return J

    return MapSnapshot(value=value, jacobian=jacobian)


@dataclass(frozen=True)
class ResidualReport:
    max_residual: float
    mean_residual: float
    count: int
    step: float


def check_bv_chain_rule(
    b: SmoothVectorField,
    snapshot: MapSnapshot,
    points: Array,
    fd_step: float = 1e-5,
) -> ResidualReport:
    """Residual of the composition derivative identity for smooth fields.

    Compares the finite-difference Jacobian of b after the map against the
    analytic chain rule (gradient of b at the image times the map Jacobian);
    rows index components of b, columns coordinates.
    """
    pts = np.asarray(points, dtype=float)
    comp = lambda x: b.value(snapshot.value(x))
    lhs = fd_jacobian(comp, pts, fd_step)
    rhs = b.jacobian(snapshot.value(pts)) @ snapshot.jacobian(pts)
    res = np.linalg.norm(lhs - rhs, axis=(-2, -1))
    return ResidualReport(
        max_residual=float(res.max()),
        mean_residual=float(res.mean()),
        count=len(pts),
        step=fd_step,
    )


@dataclass(frozen=True)
class DetIdentityReport:
    max_residual_gradient: float  # grad det J vs -det J * J^T div(J^{-1})
    max_residual_cofactor: float  # entrywise derivative expansion of det
    count: int
    step: float


def check_det_gradient_identity(
    snapshot: MapSnapshot,
    points: Array,
    fd_step: float = 1e-4,
) -> DetIdentityReport:
    """Check the two determinant-derivative identities of a C^2 map.

    (a) the gradient of det J equals -det J times J^T applied to the vector
        of column divergences of J^{-1};
    (b) each partial of det J equals det J times the trace pairing of J^{-1}
        with the corresponding partial of J.
    Outer derivatives are central differences at fd_step.
    """
    pts = np.asarray(points, dtype=float)
    d = pts.shape[-1]
    J = snapshot.jacobian(pts)
    det = np.linalg.det(J)
    if np.any(np.abs(det) < 1e-12):
        from .sde_core import SingularJacobianError

        raise SingularJacobianError("determinant vanished on the sample grid")
    K = np.linalg.inv(J)

    det_fn = lambda x: np.linalg.det(snapshot.jacobian(x))
    grad_det = fd_gradient(det_fn, pts, fd_step)

    dJ = []
    dK = []
    for l in range(d):
        e = np.zeros(d)
        e[l] = fd_step
        Jp = snapshot.jacobian(pts + e)
        Jm = snapshot.jacobian(pts - e)
        dJ.append((Jp - Jm) / (2 * fd_step))
        dK.append((np.linalg.inv(Jp) - np.linalg.inv(Jm)) / (2 * fd_step))
    dJ = np.stack(dJ, axis=-3)  # (..., l, i, j)
    dK = np.stack(dK, axis=-3)
    div_K = np.einsum("...jji->...i", dK)

    rhs_a = -det[..., None] * np.einsum("...il,...i->...l", J, div_K)
    res_a = np.linalg.norm(grad_det - rhs_a, axis=-1)

    rhs_b = det[..., None] * np.einsum("...ji,...lij->...l", K, dJ)
    res_b = np.linalg.norm(grad_det - rhs_b, axis=-1)

    return DetIdentityReport(
        max_residual_gradient=float(res_a.max()),
        max_residual_cofactor=float(res_b.max()),
        count=len(pts),
        step=fd_step,
    )
