"""Push-forward densities, the time-reversed inverse flow, drift-smoothing
stability, and growth diagnostics.

The quasi-invariance density of the composed flow is the ODE push-forward
density times the inverse-Jacobian determinant of the diffusion flow, both
evaluated at the diffusion preimage. The inverse flow runs the same
decomposition pipeline on the time-reversed driver with the drift negated.
Everything is embarrassingly parallel over (path, level, grid point);
reports are index-ordered reductions, so results do not depend on worker
count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .brownian import BrownianPath, reverse, sample_path
from .decomposition import (
    ChartSpec,
    FlowField,
    TransformedDrift,
    _as_spec,
    ball_grid,
    compose,
    forward_density,
    lagrangian_flow,
)
from .fields import RoughDrift, SmoothVectorField, UnboundedDivergenceError, mollify_drift
from .scenarios import Scenario
from .sde_core import BoxGrid, DiffusionChart, integrate_flow

Array = np.ndarray


def quasi_invariance_density(
    chart: DiffusionChart,
    flow: FlowField,
    drift: SmoothVectorField,
    row: int,
    y: Array,
    *,
    negate_drift: bool = False,
) -> Array:
    """Density of the composed flow's push-forward of volume, at points y.

    Inverts the diffusion map at y by Newton re-integration, evaluates the
    ODE push-forward density there, and multiplies by the inverse-Jacobian
    determinant of the diffusion flow at the preimage.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = y[None, :] if single else y
    step = int(flow.step_indices[row])
    z = chart.invert_point(step, ys)
    _, J = chart.reintegrate(z, step, with_jacobian=True)
    det_K = 1.0 / np.abs(np.linalg.det(J))
    rho_tilde = forward_density(flow, chart, drift, row, z, negate_drift=negate_drift)
    out = rho_tilde * det_K
    return float(out[0]) if single else out


def sigma_density(
    states: Array,
    path: BrownianPath,
    fields: Sequence[SmoothVectorField],
    drift,
) -> Array:
    """Volume density carried by the inverse of the full flow, from a trajectory.

    states holds the flow at every step, shape (steps+1, ..., d). The noise
    divergences are integrated by midpoint sums against the increments and
    the drift divergence by trapezoid in dt. The drift must carry a global
    divergence bound (a smooth catalog field, or a rough drift with
    div_bound set).
    """
    states = np.asarray(states, dtype=float)
    if states.shape[0] != path.steps + 1:
        raise ValueError("states must be stored at every step of the path")
    if isinstance(drift, RoughDrift):
        if drift.div_bound is None:
            raise UnboundedDivergenceError(
                f"drift {drift.name!r} has no global divergence bound"
            )
        drift_div = drift.divergence_density
    elif drift is None:
        drift_div = None
    else:
        drift_div = drift.divergence

    total = np.zeros(states.shape[1:-1])
    for i, f in enumerate(fields):
        vals = f.divergence(states)  # (steps+1, ...)
        mid = 0.5 * (vals[:-1] + vals[1:])
        total = total + np.tensordot(path.increments[:, i], mid, axes=(0, 0))
    if drift_div is not None:
        dv = drift_div(states)
        total = total + path.h * np.sum(0.5 * (dv[:-1] + dv[1:]), axis=0)
    return np.exp(total)


def inverse_flow(
    initial_points: Array,
    weights: Array,
    chart_grid: BoxGrid,
    path: BrownianPath,
    fields: Sequence[SmoothVectorField],
    drift: SmoothVectorField,
    T: Optional[float] = None,
    store_every: Optional[int] = None,
    box: Optional[BoxGrid] = None,
) -> FlowField:
    """Inverse flow by the decomposition pipeline on the reversed driver.

    Running the forward solution backward in time turns every Stratonovich
    sum into a sum against the reversed increments with opposite sign, so the
    reversed dynamics negates both the noise (via the driver) and the drift;
    the additive case then inverts the forward map exactly. At its final time
    the result undoes the forward flow at T almost everywhere.
    """
    from dataclasses import replace as dc_replace

    rpath = reverse(path, T)
    rpath = dc_replace(rpath, increments=-rpath.increments, refinable=False)
    spec = ChartSpec(chart_grid, rpath, tuple(fields))
    if store_every is None:
        store_every = max(rpath.steps, 1)
    yhat = lagrangian_flow(
        initial_points,
        weights,
        spec,
        drift,
        negate_drift=True,
        store_every=store_every,
        box=box,
    )
    return compose(spec, yhat)


# ---------------------------------------------------------------------------
# Stability under drift smoothing


@dataclass(frozen=True)
class StabilityReport:
    scenario: str
    seed_base: int
    paths: int
    levels: tuple
    reference_level: int
    D1: tuple  # per level, Monte Carlo mean of the L1 sup-deviation
    D1_per_path: Array  # (levels, paths)
    Dp: dict  # p -> tuple per level
    Dp_per_path: dict
    wall_times: tuple
    monotone: bool
    ratio_ok: bool

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed_base": self.seed_base,
            "paths": self.paths,
            "levels": list(self.levels),
            "reference_level": self.reference_level,
            "D1": [float(v) for v in self.D1],
            "Dp": {str(p): [float(v) for v in vals] for p, vals in self.Dp.items()},
            "monotone": bool(self.monotone),
            "ratio_ok": bool(self.ratio_ok),
        }


def _sup_deviation(Xa: FlowField, Xb: FlowField) -> Array:
    """sup over stored times of |Xa - Xb| per grid point."""
    diff = np.linalg.norm(Xa.states - Xb.states, axis=-1)  # (rows, G)
    return diff.max(axis=0)


def stability_experiment(
    scenario: Scenario,
    levels: Sequence[int],
    n_paths: int,
    p_list: Sequence[float] = (2.0,),
    *,
    T: Optional[float] = None,
    h: Optional[float] = None,
    R: Optional[float] = None,
    grid_nodes: Optional[int] = None,
    seed_base: int = 0,
    reference_level: Optional[int] = None,
    compose_rows: int = 9,
    quadrature_points_per_axis: int = 17,
) -> StabilityReport:
    """Shared-path, shared-grid comparison of flows with smoothed drifts.

    For each path, every smoothing level drives the full decomposition; the
    deviation from the reference (finest level, or the drift itself when it
    is already smooth) is integrated over the ball after taking the sup over
    a fixed time subsample. Levels must be ascending; the reference level is
    excluded from its own comparison.
    """
    levels = sorted(int(n) for n in levels)
    dft = scenario.defaults
    T = dft["T"] if T is None else T
    h = dft["h"] if h is None else h
    R = dft["R"] if R is None else R
    grid_nodes = dft["grid_nodes"] if grid_nodes is None else grid_nodes
    if reference_level is None:
        reference_level = dft.get("reference_level", 2 * levels[-1])

    pts, wts, _ = ball_grid(scenario.d, R, grid_nodes)
    chart_grid = BoxGrid.cube(
        scenario.d, dft.get("chart_radius", R + 1.5), dft.get("chart_nodes", 9)
    )

    if scenario.smooth_drift:
        level_fields = {n: scenario.drift for n in levels}
        ref_field = scenario.drift
    else:
        from .fields import MollifierSpec

        spec = MollifierSpec(
            dim=scenario.d, quadrature_points_per_axis=quadrature_points_per_axis
        )
        level_fields = {n: mollify_drift(scenario.drift, n, spec) for n in levels}
        ref_field = mollify_drift(scenario.drift, reference_level, spec)

    n_steps = int(round(T / h))
    store_every = max(1, n_steps // max(compose_rows - 1, 1))

    D1 = np.zeros((len(levels), n_paths))
    Dp = {float(p): np.zeros((len(levels), n_paths)) for p in p_list}
    walls = np.zeros(len(levels))

    for ip in range(n_paths):
        path = sample_path(seed_base + ip, scenario.m, T, h)
        src = ChartSpec(chart_grid, path, scenario.fields)
        y_ref = lagrangian_flow(pts, wts, src, ref_field, store_every=store_every)
        x_ref = compose(src, y_ref)
        for il, n in enumerate(levels):
            t0 = time.perf_counter()
            y_n = lagrangian_flow(pts, wts, src, level_fields[n], store_every=store_every)
            x_n = compose(src, y_n)
            dev = _sup_deviation(x_n, x_ref)
            D1[il, ip] = float(np.sum(wts * dev))
            for p in Dp:
                Dp[p][il, ip] = float(np.sum(wts * dev**p))
            walls[il] += time.perf_counter() - t0

    D1_mean = D1.mean(axis=1)
    monotone = True
    for il in range(len(levels) - 1):
        diff = D1[il] - D1[il + 1]
        se = diff.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else 0.0
        if diff.mean() < -3.0 * se:
            monotone = False
    ratio_ok = bool(D1_mean[-1] <= 0.5 * D1_mean[0]) if len(levels) > 1 else True

    return StabilityReport(
        scenario=scenario.name,
        seed_base=seed_base,
        paths=n_paths,
        levels=tuple(levels),
        reference_level=int(reference_level),
        D1=tuple(float(v) for v in D1_mean),
        D1_per_path=D1,
        Dp={p: tuple(float(v) for v in arr.mean(axis=1)) for p, arr in Dp.items()},
        Dp_per_path=Dp,
        wall_times=tuple(float(w) for w in walls),
        monotone=monotone,
        ratio_ok=ratio_ok,
    )


# ---------------------------------------------------------------------------
# Growth diagnostics


@dataclass(frozen=True)
class GrowthDiagnostics:
    F_hat: float  # flow growth against 1 + |x|^alpha
    G_hat: float  # Jacobian and inverse growth against 1 + |x|^beta
    Phi_hat: float  # transformed-drift growth against 1 + |x|^(1-eps1)
    alpha: float
    beta: float
    eps1: float
    per_path_F: tuple
    per_path_G: tuple
    per_path_Phi: tuple
    quantiles: dict

    def to_json_dict(self) -> dict:
        return {
            "F_hat": self.F_hat,
            "G_hat": self.G_hat,
            "Phi_hat": self.Phi_hat,
            "alpha": self.alpha,
            "beta": self.beta,
            "eps1": self.eps1,
            "quantiles": self.quantiles,
        }


def growth_diagnostics(
    scenario: Scenario,
    n_paths: int,
    radius: float,
    *,
    alpha: float = 1.5,
    beta: float = 1.0,
    eps1: Optional[float] = None,
    T: Optional[float] = None,
    h: Optional[float] = None,
    chart_nodes: int = 15,
    time_subsample: int = 17,
    seed_base: int = 0,
    mollify_level: int = 16,
) -> GrowthDiagnostics:
    """Empirical growth envelopes of the flow, its Jacobians, and the ODE drift.

    Maxima of the three ratios over (time, chart node, path), with path
    quantiles as Monte Carlo surrogates for the moments of the random
    constants. alpha must exceed 1 and beta be positive.
    """
    if alpha <= 1.0 or beta <= 0.0:
        raise ValueError("need alpha > 1 and beta > 0")
    dft = scenario.defaults
    T = dft["T"] if T is None else T
    h = dft["h"] if h is None else h
    if eps1 is None:
        eps1 = scenario.drift.growth[1] if isinstance(scenario.drift, RoughDrift) else 0.5
    drift = scenario.drift
    if isinstance(drift, RoughDrift):
        drift = mollify_drift(drift, mollify_level)

    grid = BoxGrid.cube(scenario.d, radius, chart_nodes)
    pts = grid.points()
    denom_F = 1.0 + np.linalg.norm(pts, axis=-1) ** alpha
    denom_G = 1.0 + np.linalg.norm(pts, axis=-1) ** beta
    denom_Phi = 1.0 + np.linalg.norm(pts, axis=-1) ** (1.0 - eps1)

    per_F, per_G, per_Phi = [], [], []
    for ip in range(n_paths):
        path = sample_path(seed_base + ip, scenario.m, T, h)
        chart = DiffusionChart(grid, path, scenario.fields)
        rows = np.unique(
            np.linspace(0, path.steps, min(time_subsample, path.steps + 1)).astype(int)
        )
        F = 0.0
        G = 0.0
        Phi = 0.0
        td = TransformedDrift(chart, drift)
        for k in rows:
            F = max(F, float(np.max(np.linalg.norm(chart.states[k], axis=-1) / denom_F)))
            sv = np.linalg.svd(chart.K[k], compute_uv=False)
            normK = sv[..., 0]
            normJ = 1.0 / sv[..., -1]
            G = max(G, float(np.max(np.maximum(normK, normJ) / denom_G)))
            a = td.value(float(k), pts)
            Phi = max(Phi, float(np.max(np.linalg.norm(a, axis=-1) / denom_Phi)))
        per_F.append(F)
        per_G.append(G)
        per_Phi.append(Phi)

    qs = [0.5, 0.9, 1.0]
    quantiles = {
        "F": {str(q): float(np.quantile(per_F, q)) for q in qs},
        "G": {str(q): float(np.quantile(per_G, q)) for q in qs},
        "Phi": {str(q): float(np.quantile(per_Phi, q)) for q in qs},
    }
    return GrowthDiagnostics(
        F_hat=float(np.max(per_F)),
        G_hat=float(np.max(per_G)),
        Phi_hat=float(np.max(per_Phi)),
        alpha=alpha,
        beta=beta,
        eps1=eps1,
        per_path_F=tuple(per_F),
        per_path_G=tuple(per_G),
        per_path_Phi=tuple(per_Phi),
        quantiles=quantiles,
    )


# ---------------------------------------------------------------------------
# Histogram cross-validation of the push-forward density


def pushforward_histogram_check(
    scenario: Scenario,
    *,
    t: float,
    h: float,
    seed: int = 0,
    source_radius: float = 2.2,
    source_nodes: int = 281,
    bins: int = 64,
    bin_box: float = 2.0,
    chart_grid: Optional[BoxGrid] = None,
    flow_grid_nodes: int = 21,
    flow_radius: float = 2.0,
    mollify_level: int = 16,
) -> dict:
    """Compare the density formula against a histogram of transported samples.

    Samples come from the direct solve on a fine source grid; the formula is
    evaluated at bin centers through the decomposition (diffusion preimage,
    ODE density, inverse-Jacobian determinant). Bins whose preimage leaves
    the safe core of the source box are excluded. Only the planar case is
    supported; higher dimensions would need random test functions instead.
    """
    if scenario.d != 2:
        raise NotImplementedError("histogram cross-check is capped at d = 2")
    drift = scenario.drift
    if isinstance(drift, RoughDrift):
        drift = mollify_drift(drift, mollify_level)
    path = sample_path(seed, scenario.m, t, h)

    src = BoxGrid.cube(2, source_radius, source_nodes)
    src_pts = src.points()
    cellvol = float(np.prod(src.spacing))
    ens = integrate_flow(
        src_pts, path.increments, path.h, scenario.fields, drift,
        with_jacobian=False, thin=path.steps,
    )
    samples = ens.states[-1]

    edges = np.linspace(-bin_box, bin_box, bins + 1)
    hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[edges, edges])
    binvol = (edges[1] - edges[0]) ** 2
    hist_density = hist * cellvol / binvol

    centers = 0.5 * (edges[:-1] + edges[1:])
    cgrid = np.stack(np.meshgrid(centers, centers, indexing="ij"), axis=-1).reshape(-1, 2)

    if chart_grid is None:
        chart_grid = BoxGrid.cube(2, scenario.defaults.get("chart_radius", 2.5), 9)
    chart = DiffusionChart(chart_grid, path, scenario.fields)
    fpts, fwts, fbox = ball_grid(2, flow_radius, flow_grid_nodes)
    fpts_full = fbox.points()
    flow = lagrangian_flow(
        fpts_full, np.full(len(fpts_full), cellvol), chart, drift,
        store_every=path.steps, box=fbox,
    )
    row = len(flow.times) - 1

    from .sde_core import NewtonNoConvergenceError, OutOfChartError, ChartExhaustedError
    from .decomposition import invert_ode_flow

    density = np.full(len(cgrid), np.nan)
    valid = np.zeros(len(cgrid), dtype=bool)
    step = path.steps
    try:
        z = chart.invert_point(step, cgrid)
        _, J = chart.reintegrate(z, step, with_jacobian=True)
        det_K = 1.0 / np.abs(np.linalg.det(J))
        zz = invert_ode_flow(flow, row, z)
        dens = forward_density(flow, chart, drift, row, z)
        density = dens * det_K
        # preimage of the bin center under the full map must sit well inside
        # the sampled source box for the histogram to catch all its mass
        core = source_radius - 2 * max(src.spacing)
        valid = np.all(np.abs(zz) <= core, axis=-1)
        valid &= np.all(np.abs(zz) <= flow_radius - 2 * max(fbox.spacing), axis=-1)
    except (NewtonNoConvergenceError, OutOfChartError, ChartExhaustedError):
        pass

    formula = density.reshape(bins, bins)
    mask = valid.reshape(bins, bins)
    num = np.abs(hist_density - formula)[mask].sum() * binvol
    den = formula[mask].sum() * binvol
    rel_l1 = float(num / den) if den > 0 else float("nan")
    return {
        "rel_l1": rel_l1,
        "bins_compared": int(mask.sum()),
        "hist_mass": float(hist_density[mask].sum() * binvol),
        "formula_mass": float(den),
    }


def mass_conservation_check(
    chart: DiffusionChart,
    flow: FlowField,
    drift: SmoothVectorField,
    row: int,
    R: float,
    image_grid_nodes: int = 65,
    image_radius: float = 3.0,
) -> dict:
    """Integrate the density formula over the image of the ball; compare to its volume."""
    box = BoxGrid.cube(chart.grid.dim, image_radius, image_grid_nodes)
    pts = box.points()
    cellvol = float(np.prod(box.spacing))
    step = int(flow.step_indices[row])
    z = chart.invert_point(step, pts)
    _, J = chart.reintegrate(z, step, with_jacobian=True)
    det_K = 1.0 / np.abs(np.linalg.det(J))
    from .decomposition import invert_ode_flow

    zz = invert_ode_flow(flow, row, z)
    dens = forward_density(flow, chart, drift, row, z) * det_K
    inside = np.linalg.norm(zz, axis=-1) <= R
    mass = float(np.sum(dens[inside]) * cellvol)
    d = chart.grid.dim
    import math

    ball_vol = float(np.pi ** (d / 2) / math.gamma(d / 2 + 1) * R**d)
    return {"mass": mass, "ball_volume": ball_vol, "rel_error": abs(mass - ball_vol) / ball_vol}
