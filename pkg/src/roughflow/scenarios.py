"""Frozen scenario catalog addressed by string names.

Each scenario fixes the diffusion fields and the drift (closed forms with
analytic derivatives, parameters recorded as data) plus default experiment
settings. Closed forms are code; parameters are data in the descriptors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .fields import (
    Piece,
    RoughDrift,
    SmoothVectorField,
    constant_field,
    linear_field,
    zero_field,
)


class UnknownScenarioError(KeyError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    d: int
    m: int
    fields: tuple
    drift: Union[SmoothVectorField, RoughDrift]
    defaults: dict
    tags: frozenset = frozenset()

    @property
    def smooth_drift(self) -> bool:
        return isinstance(self.drift, SmoothVectorField)

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "d": self.d,
            "m": self.m,
            "fields": [f.descriptor() for f in self.fields],
            "drift": self.drift.descriptor(),
            "defaults": dict(self.defaults),
            "tags": sorted(self.tags),
        }


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


def _tanh_pp(x):
    # second derivative of tanh
    return -2.0 * np.tanh(x) * _sech2(x)


def _tanh_pair_field(a: float = 0.4) -> SmoothVectorField:
    """Saturated field a*(tanh(x1+x2), tanh(x1-x2)) with analytic derivatives."""

    def value(x):
        u = x[..., 0] + x[..., 1]
        v = x[..., 0] - x[..., 1]
        return a * np.stack([np.tanh(u), np.tanh(v)], axis=-1)

    def jacobian(x):
        u = x[..., 0] + x[..., 1]
        v = x[..., 0] - x[..., 1]
        su, sv = _sech2(u), _sech2(v)
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = a * su
        J[..., 0, 1] = a * su
        J[..., 1, 0] = a * sv
        J[..., 1, 1] = -a * sv
        return J

    def divergence(x):
        u = x[..., 0] + x[..., 1]
        v = x[..., 0] - x[..., 1]
        return a * (_sech2(u) - _sech2(v))

    def hessian(x):
        u = x[..., 0] + x[..., 1]
        v = x[..., 0] - x[..., 1]
        tu, tv = _tanh_pp(u), _tanh_pp(v)
        H = np.empty(x.shape[:-1] + (2, 2, 2))
        H[..., 0, :, :] = (a * tu)[..., None, None]
        H[..., 1, 0, 0] = a * tv
        H[..., 1, 0, 1] = -a * tv
        H[..., 1, 1, 0] = -a * tv
        H[..., 1, 1, 1] = a * tv
        return H

    return SmoothVectorField(
        dim=2,
        value=value,
        jacobian=jacobian,
        divergence=divergence,
        hessian=hessian,
        regularity_tag="Cb3plus",
        bound_consts=(a * np.sqrt(2.0), 2.0 * a, 1.6 * a, 4.0 * a),
        name="tanh-pair",
        params={"amplitude": a},
    )


def _trig_tanh_drift(c: float = 0.3, b: float = 0.2) -> SmoothVectorField:
    """Bounded smooth drift (c sin x2 - b tanh x1, c cos x1 - b tanh x2)."""

    def value(x):
        return np.stack(
            [
                c * np.sin(x[..., 1]) - b * np.tanh(x[..., 0]),
                c * np.cos(x[..., 0]) - b * np.tanh(x[..., 1]),
            ],
            axis=-1,
        )

    def jacobian(x):
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = -b * _sech2(x[..., 0])
        J[..., 0, 1] = c * np.cos(x[..., 1])
        J[..., 1, 0] = -c * np.sin(x[..., 0])
        J[..., 1, 1] = -b * _sech2(x[..., 1])
        return J

    def divergence(x):
        return -b * (_sech2(x[..., 0]) + _sech2(x[..., 1]))

    def hessian(x):
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 0, 0, 0] = -b * _tanh_pp(x[..., 0])
        H[..., 0, 1, 1] = -c * np.sin(x[..., 1])
        H[..., 1, 0, 0] = -c * np.cos(x[..., 0])
        H[..., 1, 1, 1] = -b * _tanh_pp(x[..., 1])
        return H

    return SmoothVectorField(
        dim=2,
        value=value,
        jacobian=jacobian,
        divergence=divergence,
        hessian=hessian,
        regularity_tag="Cb3plus",
        bound_consts=(c + b, c + b, c + 0.8 * b, c + 2.0 * b),
        name="trig-tanh-drift",
        params={"trig_amplitude": c, "tanh_amplitude": b},
    )


def _rotation_bv_drift(a: float = 0.5) -> RoughDrift:
    """Bounded divergence-free rotation drift a*(-sign(x2), sign(x1))."""

    def value(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = -a * np.sign(x[..., 1])
        out[..., 1] = a * np.sign(x[..., 0])
        return out

    def zero_jac(x):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def quadrant(sx, sy):
        def pred(x):
            return (sx * x[..., 0] > 0) & (sy * x[..., 1] > 0)

        vec = a * np.array([-sy, sx], dtype=float)
        return Piece(
            predicate=pred,
            value=lambda x: np.broadcast_to(vec, np.shape(x)).copy(),
            jacobian=zero_jac,
        )

    pieces = tuple(quadrant(sx, sy) for sx in (1, -1) for sy in (1, -1))
    return RoughDrift(
        dim=2,
        value=value,
        pieces=pieces,
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(1.5 * a, 0.5),
        class_tag="BVloc",
        div_bound=0.0,
        name="rotation-bv-drift",
        params={"amplitude": a},
    )


def _sobolev_vortex_drift(a: float = 0.4) -> RoughDrift:
    """Divergence-free vortex a*(-x2, x1)/|x|^(1/2).

    The gradient blows up like |x|^(-1/2) at the origin, which is integrable
    against log(2 + .) in the plane, and the value vanishes there.
    """

    def _r(x):
        return np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)

    def value(x):
        x = np.asarray(x, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        # a * r^(-1/2) = a * (r^2)^(-1/4), zero at the origin
        scale = a * np.maximum(r2, 1e-300) ** -0.25
        scale[r2 == 0.0] = 0.0
        out = np.empty_like(x)
        out[..., 0] = -x[..., 1] * scale
        out[..., 1] = x[..., 0] * scale
        return out

    def jacobian(x, floor=1e-12):
        x = np.asarray(x, dtype=float)
        r = np.maximum(_r(x), floor)
        inv_sqrt = 1.0 / np.sqrt(r)
        x1, x2 = x[..., 0], x[..., 1]
        J = np.empty(x.shape[:-1] + (2, 2))
        # d_j of (-x2 r^-1/2): -delta_{j2} r^-1/2 + x2 x_j / (2 r^(5/2))
        J[..., 0, 0] = a * (x2 * x1 / (2 * r**2)) * inv_sqrt
        J[..., 0, 1] = a * (-1.0 + x2 * x2 / (2 * r**2)) * inv_sqrt
        J[..., 1, 0] = a * (1.0 - x1 * x1 / (2 * r**2)) * inv_sqrt
        J[..., 1, 1] = a * (-x1 * x2 / (2 * r**2)) * inv_sqrt
        return J

    def grad_norm(x):
        return np.linalg.norm(jacobian(x), axis=(-2, -1))

    piece = Piece(predicate=lambda x: _r(x) > 0, value=value, jacobian=jacobian)
    return RoughDrift(
        dim=2,
        value=value,
        pieces=(piece,),
        divergence_density=lambda x: np.zeros(np.shape(x)[:-1]),
        growth=(a, 0.5),
        class_tag="SobolevW11loc",
        div_bound=0.0,
        grad_norm=grad_norm,
        name="sobolev-vortex-drift",
        params={"amplitude": a},
    )


def _zero_drift(d: int) -> SmoothVectorField:
    f = zero_field(d)
    return SmoothVectorField(
        dim=d,
        value=f.value,
        jacobian=f.jacobian,
        divergence=f.divergence,
        hessian=f.hessian,
        regularity_tag="CInfty",
        bound_consts=(0.0, 0.0, 0.0, 0.0),
        name="zero-drift",
    )


def _build_catalog() -> dict:
    catalog = {}

    catalog["zero"] = Scenario(
        name="zero",
        d=2,
        m=1,
        fields=(zero_field(2),),
        drift=_zero_drift(2),
        defaults=dict(T=1.0, h=2.0**-8, R=1.0, grid_nodes=9, chart_radius=1.5, chart_nodes=9),
        tags=frozenset({"divergence-free", "additive-noise"}),
    )

    sigma_al = 0.5
    B = np.array([[-0.5, 0.3], [-0.2, -0.4]])
    catalog["additive-linear"] = Scenario(
        name="additive-linear",
        d=2,
        m=1,
        fields=(constant_field([sigma_al, 0.0], name="sigma-e1"),),
        drift=linear_field(B, name="linear-drift"),
        defaults=dict(T=1.0, h=2.0**-8, R=1.0, grid_nodes=9, chart_radius=2.5, chart_nodes=9),
        tags=frozenset({"additive-noise", "closed-form"}),
    )

    catalog["ode-only"] = Scenario(
        name="ode-only",
        d=2,
        m=0,
        fields=(),
        drift=linear_field(-np.eye(2), name="contraction-drift"),
        defaults=dict(T=1.0, h=2.0**-8, R=1.0, grid_nodes=9, chart_radius=1.5, chart_nodes=9),
        tags=frozenset({"deterministic", "closed-form"}),
    )

    catalog["smooth-nonlinear"] = Scenario(
        name="smooth-nonlinear",
        d=2,
        m=1,
        fields=(_tanh_pair_field(0.4),),
        drift=_trig_tanh_drift(0.3, 0.2),
        defaults=dict(T=0.5, h=1e-3, R=1.0, grid_nodes=7, chart_radius=2.0, chart_nodes=41),
        tags=frozenset(),
    )

    catalog["rotation-bv"] = Scenario(
        name="rotation-bv",
        d=2,
        m=1,
        fields=(constant_field([0.3, 0.0], name="sigma-e1"),),
        drift=_rotation_bv_drift(0.5),
        defaults=dict(
            T=1.0,
            h=2.0**-7,
            R=1.5,
            grid_nodes=13,
            chart_radius=3.0,
            chart_nodes=9,
            levels=[4, 8, 16, 32],
            reference_level=64,
        ),
        tags=frozenset({"divergence-free", "additive-noise", "bv-drift"}),
    )

    catalog["sobolev-log"] = Scenario(
        name="sobolev-log",
        d=2,
        m=1,
        fields=(constant_field([0.2, 0.0], name="sigma-e1"),),
        drift=_sobolev_vortex_drift(0.4),
        defaults=dict(
            T=0.5,
            h=2.0**-7,
            R=1.0,
            grid_nodes=129,
            chart_radius=4.0,
            chart_nodes=9,
            mollify_level=16,
        ),
        tags=frozenset({"divergence-free", "additive-noise", "sobolev-drift"}),
    )
    return catalog


_CATALOG = _build_catalog()


def sine_perturbation_map(amplitude: float = 0.1):
    """Componentwise diffeomorphism x + amplitude*sin(x) with analytic Jacobian."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return x + amplitude * np.sin(x)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        J = np.zeros(x.shape + (d,))
        diag = 1.0 + amplitude * np.cos(x)
        for i in range(d):
            J[..., i, i] = diag[..., i]
        return J

    from .decomposition import MapSnapshot

    return MapSnapshot(value=value, jacobian=jacobian)


def tanh_field_1d(a: float = 0.8) -> SmoothVectorField:
    """Saturated scalar field a*tanh(x) for one-dimensional checks."""

    def value(x):
        return a * np.tanh(x)

    def jacobian(x):
        return (a * _sech2(x[..., 0]))[..., None, None]

    def divergence(x):
        return a * _sech2(x[..., 0])

    def hessian(x):
        return (a * _tanh_pp(x[..., 0]))[..., None, None, None]

    return SmoothVectorField(
        dim=1,
        value=value,
        jacobian=jacobian,
        divergence=divergence,
        hessian=hessian,
        regularity_tag="Cb3plus",
        bound_consts=(a, a, 0.8 * a, 2.0 * a),
        name="tanh-1d",
        params={"amplitude": a},
    )


def scenario_names():
    return sorted(_CATALOG)


def get_scenario(name: str) -> Scenario:
    try:
        return _CATALOG[name]
    except KeyError:
        raise UnknownScenarioError(
            f"unknown scenario {name!r}; known: {', '.join(scenario_names())}"
        ) from None
