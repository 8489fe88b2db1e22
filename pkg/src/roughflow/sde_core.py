"""Stratonovich time stepping for the diffusion flow and the full SDE.

The scheme is predictor-corrector (Heun): the predictor advances with the
coefficients at the current state, the corrector with the average of the
coefficients at the current and predicted states. The Jacobian advances by
the same scheme applied to the variational (matrix) system, sharing the
coefficient evaluation points with the state. Along every trajectory a
running quadrature of the divergence of the coefficients is accumulated
(midpoint sums against the increments, trapezoid in dt), which is the log of
the pathwise volume factor.

Distinct (path, initial point) integrations are independent; everything here
is batched over initial points with numpy broadcasting and trajectories are
immutable once returned.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .brownian import BrownianPath
from .fields import SmoothVectorField

Array = np.ndarray

DET_FLOOR = 1e-12
INVERSION_RESIDUAL_TOL = 1e-8


class NonFiniteStateError(FloatingPointError):
    """A state component became NaN or infinite during integration."""


class SingularJacobianError(ArithmeticError):
    """|det J| fell below tolerance; reduce the step size."""


class ChartExhaustedError(ValueError):
    """A query left the region covered by the flow grid; enlarge it and retry."""


class NewtonNoConvergenceError(ArithmeticError):
    """Point inversion stalled; carries the residual that was achieved."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class OutOfChartError(ValueError):
    """The queried point lies outside the image of the stored grid."""


def _check_finite(x: Array) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("state became non-finite; reduce the step size")


def heun_step(
    state: Array,
    J: Optional[Array],
    fields: Sequence[SmoothVectorField],
    dw: Array,
    drift: Optional[SmoothVectorField],
    h: float,
):
    """One Stratonovich Heun step of the state and (optionally) its Jacobian.

    state has shape (..., d); J, when given, shape (..., d, d); dw shape (m,)
    or broadcastable to (..., m). Returns (state', J').
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    state = np.asarray(state, dtype=float)
    dw = np.asarray(dw, dtype=float)

    def disp(at):
        out = np.zeros_like(at)
        for i, f in enumerate(fields):
            out = out + f.value(at) * dw[..., i, None]
        if drift is not None:
            out = out + drift.value(at) * h
        return out

    d0 = disp(state)
    pred = state + d0
    new_state = state + 0.5 * (d0 + disp(pred))
    _check_finite(new_state)

    new_J = None
    if J is not None:
        def coeff_matrix(at):
            M = np.zeros(at.shape[:-1] + (at.shape[-1], at.shape[-1]))
            for i, f in enumerate(fields):
                M = M + f.jacobian(at) * dw[..., i, None, None]
            if drift is not None:
                M = M + drift.jacobian(at) * h
            return M

        M0 = coeff_matrix(state)
        J_pred = J + M0 @ J
        M1 = coeff_matrix(pred)
        new_J = J + 0.5 * (M0 @ J + M1 @ J_pred)
        _check_finite(new_J)
    return new_state, new_J


def _divergence_values(fields, drift, at):
    """Divergence of each coefficient at given points (drift last, or None)."""
    vals = [f.divergence(at) for f in fields]
    vals.append(drift.divergence(at) if drift is not None else None)
    return vals


def _contract_divergences(vals, dw, h):
    out = 0.0
    for i, v in enumerate(vals[:-1]):
        out = out + v * dw[..., i]
    if vals[-1] is not None:
        out = out + vals[-1] * h
    return out


def _divergence_sum(
    fields: Sequence[SmoothVectorField],
    drift: Optional[SmoothVectorField],
    at: Array,
    dw: Array,
    h: float,
) -> Array:
    """Divergence of the coefficients contracted with (dw, h) at given points."""
    return _contract_divergences(_divergence_values(fields, drift, at), dw, h)


@dataclass(frozen=True)
class FlowEnsemble:
    """Batched trajectories on a shared time grid (thinned storage)."""

    times: Array  # (n_out,)
    step_indices: Array  # (n_out,) indices into the full step sequence
    states: Array  # (n_out, ..., d)
    jacobians: Optional[Array]  # (n_out, ..., d, d)
    liouville_log: Array  # (n_out, ...), divergence quadrature along each path
    h: float


def integrate_flow(
    x0: Array,
    increments: Array,
    h: float,
    fields: Sequence[SmoothVectorField],
    drift: Optional[SmoothVectorField] = None,
    with_jacobian: bool = True,
    thin: int = 1,
) -> FlowEnsemble:
    """Integrate the flow from a batch of initial points over given increments.

    increments has shape (N, m) or (N, ..., m) broadcastable against the batch.
    Storage keeps every thin-th step plus the endpoint; the divergence
    quadrature runs over the full step sequence regardless of thinning.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    x = np.asarray(x0, dtype=float)
    d = x.shape[-1]
    n_steps = increments.shape[0]
    J = None
    if with_jacobian:
        J = np.broadcast_to(np.eye(d), x.shape + (d,)).copy()
    liou = np.zeros(x.shape[:-1])

    stored = [0]
    states = [x.copy()]
    jacs = [J.copy()] if with_jacobian else None
    lious = [liou.copy()]

    divs = _divergence_values(fields, drift, x)
    for k in range(n_steps):
        dw = increments[k]
        div_prev = _contract_divergences(divs, dw, h)
        x, J = heun_step(x, J, fields, dw, drift, h)
        divs = _divergence_values(fields, drift, x)
        div_next = _contract_divergences(divs, dw, h)
        liou = liou + 0.5 * (div_prev + div_next)
        if (k + 1) % thin == 0 or k + 1 == n_steps:
            stored.append(k + 1)
            states.append(x.copy())
            if with_jacobian:
                jacs.append(J.copy())
            lious.append(liou.copy())

    idx = np.asarray(stored)
    return FlowEnsemble(
        times=idx * h,
        step_indices=idx,
        states=np.stack(states),
        jacobians=np.stack(jacs) if with_jacobian else None,
        liouville_log=np.stack(lious),
        h=h,
    )


@dataclass(frozen=True)
class FlowTrajectory:
    """Per-(path, x) record of the state, Jacobian, its inverse, and det.

    Guarantees at construction: J_0 = K_0 = I, det never changes sign, the
    inversion residual max_t ||J_t K_t - I|| stays below tolerance.
    """

    times: Array
    states: Array  # (n, d)
    jacobians: Array  # (n, d, d)
    inverses: Array  # (n, d, d)
    dets: Array  # (n,)
    liouville_log: Array  # (n,)
    inversion_residual: float

    @classmethod
    def from_arrays(cls, times, states, jacobians, liouville_log):
        dets = np.linalg.det(jacobians)
        if np.any(np.abs(dets) < DET_FLOOR):
            raise SingularJacobianError(
                "det J fell below tolerance; the discretization destroyed "
                "invertibility, reduce the step size"
            )
        if np.any(np.sign(dets) != np.sign(dets[0])):
            raise SingularJacobianError("det J changed sign along the trajectory")
        inverses = np.linalg.inv(jacobians)
        eye = np.eye(states.shape[-1])
        residual = float(
            np.max(np.linalg.norm(jacobians @ inverses - eye, axis=(-2, -1)))
        )
        return cls(
            times=times,
            states=states,
            jacobians=jacobians,
            inverses=inverses,
            dets=dets,
            liouville_log=liouville_log,
            inversion_residual=residual,
        )

    def to_csv(self, filename) -> None:
        """Columns: t, x_1..x_d, J flattened row-major, det."""
        d = self.states.shape[-1]
        cols = [self.times[:, None], self.states]
        cols.append(self.jacobians.reshape(len(self.times), d * d))
        cols.append(self.dets[:, None])
        header = (
            "t,"
            + ",".join(f"x_{i + 1}" for i in range(d))
            + ","
            + ",".join(f"J_{i + 1}{j + 1}" for i in range(d) for j in range(d))
            + ",det"
        )
        np.savetxt(filename, np.hstack(cols), delimiter=",", header=header, comments="")


def diffusion_flow(
    x: Array,
    path: BrownianPath,
    fields: Sequence[SmoothVectorField],
    thin: int = 1,
) -> FlowTrajectory:
    """Drift-free flow from a single point with its variational Jacobian."""
    ens = integrate_flow(
        np.asarray(x, dtype=float), path.increments, path.h, fields, None, True, thin
    )
    return FlowTrajectory.from_arrays(
        ens.times, ens.states, ens.jacobians, ens.liouville_log
    )


def direct_flow(
    x: Array,
    path: BrownianPath,
    fields: Sequence[SmoothVectorField],
    drift: SmoothVectorField,
    thin: int = 1,
) -> FlowTrajectory:
    """Full SDE flow (diffusion plus smooth drift) from a single point."""
    ens = integrate_flow(
        np.asarray(x, dtype=float), path.increments, path.h, fields, drift, True, thin
    )
    return FlowTrajectory.from_arrays(
        ens.times, ens.states, ens.jacobians, ens.liouville_log
    )


# ---------------------------------------------------------------------------
# Tensor-grid interpolation and the chart of the diffusion flow


@dataclass(frozen=True)
class BoxGrid:
    """Uniform tensor grid over a box, used as the chart of initial points."""

    lo: Array  # (d,)
    hi: Array  # (d,)
    shape: tuple  # nodes per axis

    @classmethod
    def cube(cls, d: int, radius: float, nodes_per_axis: int, center=None):
        c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        return cls(
            lo=c - radius, hi=c + radius, shape=(int(nodes_per_axis),) * d
        )

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> Array:
        return (self.hi - self.lo) / (np.asarray(self.shape) - 1)

    def axes(self):
        return [
            np.linspace(self.lo[j], self.hi[j], self.shape[j])
            for j in range(self.dim)
        ]

    def points(self) -> Array:
        """All nodes, shape (prod(shape), d)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interpolate(self, values_flat: Array, x: Array) -> Array:
        """Multilinear interpolation of node values (first axis = node) at x."""
        x = np.asarray(x, dtype=float)
        u = (x - self.lo) / self.spacing
        upper = np.asarray(self.shape) - 1
        if np.any(u < -1e-9) or np.any(u > upper + 1e-9):
            worst = float(np.max(np.maximum(-u, u - upper)))
            raise ChartExhaustedError(
                f"query left the chart by {worst:.3g} cells; enlarge the chart "
                "radius and retry"
            )
        u = np.clip(u, 0.0, upper.astype(float))
        i0 = np.minimum(u.astype(int), upper - 1)
        f = u - i0
        out = None
        extra = values_flat.ndim - 1
        for offs in itertools.product((0, 1), repeat=self.dim):
            idx = i0 + np.asarray(offs)
            flat = np.ravel_multi_index(
                tuple(idx[..., j] for j in range(self.dim)), self.shape
            )
            w = np.ones(x.shape[:-1])
            for j, o in enumerate(offs):
                w = w * (f[..., j] if o else 1.0 - f[..., j])
            term = w.reshape(w.shape + (1,) * extra) * values_flat[flat]
            out = term if out is None else out + term
        return out

    def gradient_fields(self, values_flat: Array) -> Array:
        """Central-difference spatial derivatives of node values.

        Returns an array of shape (nodes, d, ...) where axis 1 indexes the
        differentiated coordinate; step equals the grid spacing.
        """
        v = values_flat.reshape(self.shape + values_flat.shape[1:])
        grads = np.gradient(v, *self.spacing, axis=tuple(range(self.dim)))
        if self.dim == 1:
            grads = [grads]
        stacked = np.stack(grads, axis=self.dim)  # (shape..., d, ...)
        return stacked.reshape((-1, self.dim) + values_flat.shape[1:])


@dataclass
class _ChartSlice:
    step: int
    states: Array  # (G, d)
    K: Array  # (G, d, d)
    det: Array  # (G,)
    div_K: Array  # (G, d): divergence of each column of K
    liouville_log: Array  # (G,)


def chart_slices(
    grid: BoxGrid,
    path: BrownianPath,
    fields: Sequence[SmoothVectorField],
):
    """Advance the drift-free flow on all chart nodes, yielding one slice per step.

    Each slice carries the node images, inverse Jacobians, determinants, the
    per-column divergence of the inverse Jacobian (central differences over
    the chart at grid spacing), and the running divergence quadrature.
    """
    pts = grid.points()
    d = grid.dim
    x = pts.copy()
    J = np.broadcast_to(np.eye(d), x.shape + (d,)).copy()
    liou = np.zeros(x.shape[:-1])

    def make_slice(step, x, J, liou):
        det = np.linalg.det(J)
        if np.any(np.abs(det) < DET_FLOOR):
            raise SingularJacobianError(
                "chart Jacobian became singular; reduce the step size"
            )
        K = np.linalg.inv(J)
        gradK = grid.gradient_fields(K)  # (G, d, d, d): [node, j, row, col]
        div_K = np.einsum("gjji->gi", gradK)  # column divergences
        return _ChartSlice(step, x.copy(), K, det, div_K, liou.copy())

    yield make_slice(0, x, J, liou)
    for k in range(path.steps):
        dw = path.increments[k]
        div_prev = _divergence_sum(fields, None, x, dw, path.h)
        x, J = heun_step(x, J, fields, dw, None, path.h)
        div_next = _divergence_sum(fields, None, x, dw, path.h)
        liou = liou + 0.5 * (div_prev + div_next)
        yield make_slice(k + 1, x, J, liou)


_CHART_MEMORY_BUDGET = 400_000_000  # bytes


class DiffusionChart:
    """Stored per-step snapshots of the drift-free flow over a chart grid.

    Provides the flow map, inverse Jacobian, determinant, column divergences
    of the inverse Jacobian, and the volume quadrature at arbitrary chart
    points, with multilinear interpolation in space and linear interpolation
    in time between stored steps. Heavy consumers that only sweep forward in
    time should iterate chart_slices directly instead of building a chart.
    """

    def __init__(self, grid: BoxGrid, path: BrownianPath, fields):
        self.grid = grid
        self.path = path
        self.fields = tuple(fields)
        G = int(np.prod(grid.shape))
        d = grid.dim
        n = path.steps + 1
        footprint = n * G * (2 * d + d * d + 2) * 8
        if footprint > _CHART_MEMORY_BUDGET:
            raise MemoryError(
                f"chart storage would take {footprint / 1e9:.2f} GB; use "
                "chart_slices streaming instead"
            )
        self.states = np.empty((n, G, d))
        self.K = np.empty((n, G, d, d))
        self.det = np.empty((n, G))
        self.div_K = np.empty((n, G, d))
        self.liouville_log = np.empty((n, G))
        for sl in chart_slices(grid, path, fields):
            self.states[sl.step] = sl.states
            self.K[sl.step] = sl.K
            self.det[sl.step] = sl.det
            self.div_K[sl.step] = sl.div_K
            self.liouville_log[sl.step] = sl.liouville_log

    # -- time-interpolated queries; tq is a fractional step index ----------

    def _lerp(self, arr, tq, x):
        k = int(np.floor(tq))
        k = min(max(k, 0), arr.shape[0] - 1)
        frac = tq - k
        v0 = self.grid.interpolate(arr[k], x)
        if frac <= 0 or k + 1 >= arr.shape[0]:
            return v0
        v1 = self.grid.interpolate(arr[k + 1], x)
        return (1.0 - frac) * v0 + frac * v1

    def phi(self, tq: float, x: Array) -> Array:
        return self._lerp(self.states, tq, x)

    def inverse_jacobian(self, tq: float, x: Array) -> Array:
        return self._lerp(self.K, tq, x)

    def det_at(self, tq: float, x: Array) -> Array:
        return self._lerp(self.det, tq, x)

    def div_inverse_jacobian(self, tq: float, x: Array) -> Array:
        return self._lerp(self.div_K, tq, x)

    def liouville_at(self, tq: float, x: Array) -> Array:
        return self._lerp(self.liouville_log, tq, x)

    # -- exact evaluations by re-integration on the stored increments ------

    def reintegrate(self, x0: Array, upto_step: int, with_jacobian: bool = False):
        """Exact flow evaluation from new initial points on the same increments."""
        ens = integrate_flow(
            x0,
            self.path.increments[:upto_step],
            self.path.h,
            self.fields,
            None,
            with_jacobian,
            thin=max(upto_step, 1),
        )
        if with_jacobian:
            return ens.states[-1], ens.jacobians[-1]
        return ens.states[-1]

    def invert_point(self, step: int, y: Array, tol: float = 1e-8, max_iter: int = 50):
        """Solve flow(step, x) = y by Newton, seeded from the nearest node image.

        Accepts a single point or a batch; returns points of the same shape.
        """
        return invert_flow_point(
            self.fields,
            self.path,
            step,
            y,
            seed_points=self.grid.points(),
            seed_images=self.states[step],
            box=(self.grid.lo, self.grid.hi, np.max(self.grid.spacing)),
            tol=tol,
            max_iter=max_iter,
        )


def invert_flow_point(
    fields,
    path: BrownianPath,
    step: int,
    y: Array,
    seed_points: Array,
    seed_images: Array,
    box=None,
    tol: float = 1e-8,
    max_iter: int = 50,
):
    """Newton inversion of the drift-free flow at a given step index.

    Each iterate re-integrates the flow and its Jacobian from the current
    candidate on the stored increments, so the solve is exact up to the
    integrator. Raises when stalled, or when the solution leaves the seeded
    chart box (the query then lies outside the stored grid's image).
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = y[None, :] if single else y.reshape(-1, y.shape[-1])

    if step == 0:
        out = ys.copy()
        return (out[0] if single else out.reshape(y.shape))

    d2 = np.sum((seed_images[None, :, :] - ys[:, None, :]) ** 2, axis=-1)
    x = seed_points[np.argmin(d2, axis=1)].copy()

    inc = path.increments[:step]
    h = path.h
    residual = np.inf
    for _ in range(max_iter):
        ens = integrate_flow(x, inc, h, fields, None, True, thin=step)
        fx, J = ens.states[-1], ens.jacobians[-1]
        r = fx - ys
        residual = np.max(np.linalg.norm(r, axis=-1))
        if residual <= tol:
            break
        x = x - np.linalg.solve(J, r[..., None])[..., 0]
        _check_finite(x)
    if residual > tol:
        raise NewtonNoConvergenceError(
            f"inversion stalled at residual {residual:.3e}", residual
        )
    if box is not None:
        lo, hi, margin = box
        if np.any(x < lo - margin) or np.any(x > hi + margin):
            raise OutOfChartError(
                "inverted point lies outside the stored grid; the query is "
                "outside the chart image"
            )
    return x[0] if single else x.reshape(y.shape)
