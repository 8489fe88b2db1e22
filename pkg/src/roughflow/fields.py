"""Vector fields: smooth diffusion coefficients, rough drifts, and mollification.

All field callables are vectorized: they accept points of shape (..., d) and
return values of shape (..., d), Jacobians of shape (..., d, d) with rows
indexed by component and columns by coordinate, and Hessians of shape
(..., d, d, d) holding the second partials of each component. Evaluations are
pure functions of the input point, so fields can be shared freely across
workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray
VectorMap = Callable[[Array], Array]


class UnboundedDivergenceError(ValueError):
    """A global divergence bound is required but was not supplied."""


class MollifierContractError(ValueError):
    """The mollifier violates its support/level contract."""


def fd_jacobian(f: VectorMap, x: Array, step: float = 1e-5) -> Array:
    """Central finite-difference Jacobian of a vectorized map at points x.

    Returns an array of shape (..., out_dim, d); rows index output components,
    columns the differentiated coordinate.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        cols.append((f(x + e) - f(x - e)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def fd_gradient(f: Callable[[Array], Array], x: Array, step: float = 1e-5) -> Array:
    """Central finite-difference gradient of a scalar map, shape (..., d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    comps = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        comps.append((f(x + e) - f(x - e)) / (2.0 * step))
    return np.stack(comps, axis=-1)


@dataclass(frozen=True)
class SmoothVectorField:
    """A closed-form field with analytic derivatives.

    divergence defaults to the trace of the Jacobian; fields constructed with
    an explicit divergence must agree with that trace (this is asserted by the
    test suite at 1e-12 for every catalog field). hessian may be omitted for
    fields that never enter second-order correction terms.
    """

    dim: int
    value: VectorMap
    jacobian: VectorMap
    divergence: Optional[Callable[[Array], Array]] = None
    hessian: Optional[VectorMap] = None
    regularity_tag: str = "CInfty"  # "Cb3plus" or "CInfty"
    bound_consts: Optional[tuple] = None  # sup norms of value and derivatives 1..3
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.divergence is None:
            jac = self.jacobian
            object.__setattr__(
                self, "divergence", lambda x: np.einsum("...ii->...", jac(x))
            )

    def descriptor(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": dict(self.params)}


@dataclass(frozen=True)
class Piece:
    """One closed-form piece of a rough drift on a predicate region."""

    predicate: Callable[[Array], Array]  # boolean mask of shape (...,)
    value: VectorMap
    jacobian: Optional[VectorMap] = None


@dataclass(frozen=True)
class RoughDrift:
    """An a.e.-defined drift with piecewise structure and growth constants.

    growth = (C, eps0) records the sublinear envelope
    |A0(x)| <= C (1 + |x|^(1 - eps0)). divergence_density is the (locally
    bounded) density of the distributional divergence; div_bound, when given,
    is a global sup of its absolute value. grad_norm optionally evaluates
    |grad A0| where the pointwise derivative exists (Sobolev scenarios).
    """

    dim: int
    value: VectorMap
    pieces: tuple
    divergence_density: Callable[[Array], Array]
    growth: tuple  # (C, eps0)
    class_tag: str  # "Smooth" | "SobolevW11loc" | "BVloc"
    div_bound: Optional[float] = None
    grad_norm: Optional[Callable[[Array], Array]] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": dict(self.params)}


# ---------------------------------------------------------------------------
# Constructors for common closed forms


def zero_field(d: int) -> SmoothVectorField:
    return SmoothVectorField(
        dim=d,
        value=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d)),
        hessian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        regularity_tag="Cb3plus",
        bound_consts=(0.0, 0.0, 0.0, 0.0),
        name="zero",
    )


def constant_field(vec: Sequence[float], name: str = "constant") -> SmoothVectorField:
    v = np.asarray(vec, dtype=float)
    d = v.shape[0]
    return SmoothVectorField(
        dim=d,
        value=lambda x: np.broadcast_to(v, np.shape(x)).copy(),
        jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d)),
        hessian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        regularity_tag="Cb3plus",
        bound_consts=(float(np.linalg.norm(v)), 0.0, 0.0, 0.0),
        name=name,
        params={"vector": v.tolist()},
    )


def linear_field(B: Array, name: str = "linear") -> SmoothVectorField:
    B = np.asarray(B, dtype=float)
    d = B.shape[0]
    return SmoothVectorField(
        dim=d,
        value=lambda x: np.asarray(x, dtype=float) @ B.T,
        jacobian=lambda x: np.broadcast_to(B, np.shape(x)[:-1] + (d, d)).copy(),
        divergence=lambda x: np.full(np.shape(x)[:-1], float(np.trace(B))),
        hessian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        name=name,
        params={"matrix": B.tolist()},
    )


# ---------------------------------------------------------------------------
# Mollification


def _bump(y: Array) -> Array:
    """Unnormalized smooth bump supported in the open unit ball."""
    y = np.asarray(y, dtype=float)
    s = np.sum(y * y, axis=-1)
    out = np.zeros_like(s)
    inside = s < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        out[inside] = np.exp(-1.0 / (1.0 - s[inside]))
    return out


def _bump_grad(y: Array) -> Array:
    """Gradient of the unnormalized bump, zero outside the unit ball."""
    y = np.asarray(y, dtype=float)
    s = np.sum(y * y, axis=-1)
    out = np.zeros_like(y)
    inside = s < 1.0
    yi = y[inside]
    si = s[inside]
    with np.errstate(divide="ignore", over="ignore"):
        out[inside] = (
            np.exp(-1.0 / (1.0 - si)) * (-2.0 / (1.0 - si) ** 2)
        )[..., None] * yi
    return out


def _cutoff_profile(s: Array) -> Array:
    """Radial profile: exactly 1 for s <= 1, exactly 0 for s >= 2, smooth between."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s - 1.0, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
        g = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    out = g / (f + g)
    out = np.where(s <= 1.0, 1.0, out)
    out = np.where(s >= 2.0, 0.0, out)
    return out


def _cutoff_profile_deriv(s: Array) -> Array:
    s = np.asarray(s, dtype=float)
    t = s - 1.0
    inside = (t > 0.0) & (t < 1.0)
    out = np.zeros_like(s)
    ti = t[inside]
    with np.errstate(divide="ignore", over="ignore"):
        f = np.exp(-1.0 / ti)
        g = np.exp(-1.0 / (1.0 - ti))
        fp = f / ti**2
        gp = -g / (1.0 - ti) ** 2
        out[inside] = (gp * f - g * fp) / (f + g) ** 2
    return out


def _midpoint_nodes(d: int, radius: float, q: int):
    """Tensor-product midpoint nodes over [-radius, radius]^d and the cell volume."""
    cell = 2.0 * radius / q
    axis = -radius + cell * (np.arange(q) + 0.5)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    return nodes, cell**d


@dataclass(frozen=True)
class MollifierSpec:
    """Kernel, cutoff, and quadrature resolution for drift smoothing.

    The kernel is supported in the unit ball (support_radius <= 1; evaluations
    are scaled to radius 1/n at mollification level n) and has unit integral.
    The cutoff equals 1 on the unit ball and 0 outside radius 2, applied at
    scale n. cutoff_grad_sup is the sup norm of the cutoff gradient at scale 1;
    pass an explicit value to override the numerically measured default.
    """

    dim: int
    quadrature_points_per_axis: int = 17
    support_radius: float = 1.0
    kernel: VectorMap = None  # normalized; set in __post_init__ when omitted
    kernel_grad: VectorMap = None
    cutoff_profile: Callable[[Array], Array] = None
    cutoff_profile_deriv: Callable[[Array], Array] = None
    cutoff_grad_sup: float = None

    def __post_init__(self):
        if self.kernel is None:
            z = _bump_normalization(self.dim)
            object.__setattr__(self, "kernel", lambda y: _bump(y) / z)
            object.__setattr__(self, "kernel_grad", lambda y: _bump_grad(y) / z)
        if self.cutoff_profile is None:
            object.__setattr__(self, "cutoff_profile", _cutoff_profile)
            object.__setattr__(self, "cutoff_profile_deriv", _cutoff_profile_deriv)
        if self.cutoff_grad_sup is None:
            s = np.linspace(1.0, 2.0, 4001)
            object.__setattr__(
                self,
                "cutoff_grad_sup",
                float(np.max(np.abs(self.cutoff_profile_deriv(s)))),
            )

    def kernel_mass(self, points_per_axis: int = 101) -> float:
        """Quadrature estimate of the kernel integral (should be 1)."""
        nodes, vol = _midpoint_nodes(self.dim, self.support_radius, points_per_axis)
        return float(np.sum(self.kernel(nodes)) * vol)


_BUMP_NORMALIZATION_CACHE: dict = {}


def _bump_normalization(d: int) -> float:
    # fine midpoint quadrature; the bump is smooth with all derivatives
    # vanishing at the boundary, so midpoint converges superalgebraically
    if d not in _BUMP_NORMALIZATION_CACHE:
        q = 801 if d == 1 else (401 if d == 2 else 101)
        nodes, vol = _midpoint_nodes(d, 1.0, q)
        _BUMP_NORMALIZATION_CACHE[d] = float(np.sum(_bump(nodes)) * vol)
    return _BUMP_NORMALIZATION_CACHE[d]


def mollify_drift(drift: RoughDrift, n: int, spec: MollifierSpec = None) -> SmoothVectorField:
    """Smooth a rough drift by kernel convolution at radius 1/n times a radial cutoff.

    The returned field evaluates the convolution by tensor-product midpoint
    quadrature over the kernel support; its Jacobian convolves with the kernel
    gradient (plus the cutoff product rule), and its divergence is exactly the
    trace of that Jacobian. Discrete kernel weights are normalized to unit sum
    so constants are reproduced exactly.
    """
    if n < 1:
        raise ValueError(f"mollification level must be >= 1, got {n}")
    if spec is None:
        spec = MollifierSpec(dim=drift.dim)
    if spec.dim != drift.dim:
        raise ValueError("mollifier dimension does not match drift dimension")
    if spec.support_radius > 1.0 + 1e-12:
        raise MollifierContractError(
            "kernel support radius exceeds the level-n mollification radius 1/n"
        )

    d = drift.dim
    radius = spec.support_radius / n
    q = spec.quadrature_points_per_axis
    nodes, cellvol = _midpoint_nodes(d, radius, q)  # (Q, d)
    kv = spec.kernel(nodes * n) * float(n) ** d  # scaled kernel at the nodes
    w = kv * cellvol
    norm = w.sum()
    w = w / norm
    gw = spec.kernel_grad(nodes * n) * float(n) ** (d + 1) * cellvol / norm  # (Q, d)

    drift_value = drift.value
    profile = spec.cutoff_profile
    profile_deriv = spec.cutoff_profile_deriv

    # one-slot memo: value/jacobian/divergence queried at the same batch reuse
    # the drift evaluations at the shifted quadrature points
    memo = {"key": None, "vals": None}

    def _drift_vals(x):
        key = (x.shape, hash(x.tobytes()))
        if memo["key"] != key:
            pts = x[..., None, :] - nodes  # (..., Q, d)
            memo["vals"] = drift_value(pts)
            memo["key"] = key
        return memo["vals"]

    def _conv_and_jac(x, need_jac):
        x = np.asarray(x, dtype=float)
        vals = _drift_vals(x)
        conv = np.einsum("...qi,q->...i", vals, w)
        jac = np.einsum("...qi,qj->...ij", vals, gw) if need_jac else None
        return conv, jac

    def _cutoff_terms(x, need_grad):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        s = r / n
        c = profile(s)
        if not need_grad:
            return c, None
        dc = profile_deriv(s) / n
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(r[..., None] > 0, x / np.maximum(r, 1e-300)[..., None], 0.0)
        grad = dc[..., None] * direction
        return c, grad

    def value(x):
        conv, _ = _conv_and_jac(x, need_jac=False)
        c, _ = _cutoff_terms(x, need_grad=False)
        return c[..., None] * conv

    def jacobian(x):
        conv, jc = _conv_and_jac(x, need_jac=True)
        c, gc = _cutoff_terms(x, need_grad=True)
        outer = np.einsum("...j,...i->...ij", gc, conv)
        return outer + c[..., None, None] * jc

    def divergence(x):
        x = np.asarray(x, dtype=float)
        vals = _drift_vals(x)
        conv = np.einsum("...qi,q->...i", vals, w)
        trace = np.einsum("...qi,qi->...", vals, gw)
        c, gc = _cutoff_terms(x, need_grad=True)
        return np.einsum("...i,...i->...", gc, conv) + c * trace

    return SmoothVectorField(
        dim=d,
        value=value,
        jacobian=jacobian,
        divergence=divergence,
        regularity_tag="CInfty",
        name=f"mollified[{drift.name or 'drift'}, n={n}]",
        params={"level": n, "radius": radius, "base": drift.name},
    )


def mollified_divergence_bound(
    drift: RoughDrift, spec: MollifierSpec = None, cutoff_grad_sup: float = None
) -> float:
    """Uniform bound on the divergence of every mollification level of a drift.

    Equals 3*C*sup|grad cutoff| + sup|div drift|, where C is the drift's
    sublinear growth constant. Requires a global divergence bound on the drift.
    """
    if drift.div_bound is None:
        raise UnboundedDivergenceError(
            f"drift {drift.name!r} carries no global divergence bound"
        )
    if spec is None:
        spec = MollifierSpec(dim=drift.dim)
    gs = spec.cutoff_grad_sup if cutoff_grad_sup is None else cutoff_grad_sup
    C = float(drift.growth[0])
    return 3.0 * C * gs + float(drift.div_bound)


@dataclass(frozen=True)
class GrowthReport:
    max_ratio: float
    bound: float
    satisfied: bool
    argmax_point: tuple
    sample_count: int
    radius: float


def growth_report(
    field_or_value,
    C: float,
    eps0: float,
    sample_count: int = 1000,
    radius: float = 10.0,
    seed: int = 0,
) -> GrowthReport:
    """Sample |field(x)| / (1 + |x|^(1-eps0)) over a ball and compare to C.

    Violations are reported, never raised.
    """
    value = getattr(field_or_value, "value", field_or_value)
    dim = getattr(field_or_value, "dim", None)
    if dim is None:
        raise ValueError("pass a field object or supply points explicitly")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(sample_count, dim))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    radii = radius * rng.random(sample_count) ** (1.0 / dim)
    pts = directions * radii[:, None]
    ratios = np.linalg.norm(value(pts), axis=-1) / (
        1.0 + np.linalg.norm(pts, axis=-1) ** (1.0 - eps0)
    )
    k = int(np.argmax(ratios))
    return GrowthReport(
        max_ratio=float(ratios[k]),
        bound=float(C),
        satisfied=bool(ratios[k] <= C),
        argmax_point=tuple(pts[k]),
        sample_count=sample_count,
        radius=radius,
    )
