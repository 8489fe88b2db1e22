"""Batch experiment runner: configuration, orchestration, result emission.

Usage: roughflow <command> --config <path> [--out <dir>] [--seed <u64>]

Commands: simulate, stability, invert, transport, lipschitz, identities,
calibrate. Each emits a JSON summary (sorted keys, schema_version 1; wall
clock data lives under "meta" so everything else is byte-reproducible for a
fixed config and seed) plus CSV detail files. The exit status is nonzero
exactly when a declared invariant fails; configuration, scenario, and
resource problems map to distinct codes documented in the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constants
from .brownian import sample_path
from .decomposition import (
    ChartSpec,
    check_bv_chain_rule,
    check_det_gradient_identity,
    ball_grid,
    compose,
    lagrangian_flow,
)
from .fields import MollifierSpec, RoughDrift, mollify_drift
from .flow_analysis import (
    growth_diagnostics,
    inverse_flow,
    pushforward_histogram_check,
    stability_experiment,
)
from .maximal import (
    ScalarGrid,
    approx_diff_check,
    calibrate_constants,
    calibrate_pointwise,
    lipschitz_set,
)
from .scenarios import (
    UnknownScenarioError,
    get_scenario,
    scenario_names,
    sine_perturbation_map,
    tanh_field_1d,
)
from .sde_core import (
    BoxGrid,
    ChartExhaustedError,
    DiffusionChart,
    NewtonNoConvergenceError,
    OutOfChartError,
    SingularJacobianError,
    direct_flow,
    integrate_flow,
)
from .transport import (
    TestFunction,
    bump_theta,
    density_evolution_check,
    ito_weak_residual,
    random_transport_check,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_UNKNOWN_SCENARIO = 3
EXIT_RESOURCE = 4


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str
    T: float
    h: float
    R: float
    grid_nodes: int
    seed_base: int = 0
    paths: int = 8
    levels: list = field(default_factory=lambda: [4, 8, 16, 32])
    reference_level: int = 64
    p_exponents: list = field(default_factory=lambda: [2.0])
    mollify_level: int = 16
    test_functions: list = field(default_factory=list)
    maximal: dict = field(default_factory=dict)
    chart_radius: float = None
    chart_nodes: int = None
    out_dir: str = "out"
    tolerances: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioConfig":
        if "scenario" not in doc:
            raise ConfigError("config must name a scenario")
        name = doc["scenario"]
        try:
            scn = get_scenario(name)
        except UnknownScenarioError:
            raise  # distinct exit code upstream
        dft = scn.defaults
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {
            "scenario": name,
            "T": doc.get("T", dft["T"]),
            "h": doc.get("h", dft["h"]),
            "R": doc.get("R", dft["R"]),
            "grid_nodes": doc.get("grid_nodes", dft["grid_nodes"]),
        }
        for key in (
            "seed_base",
            "paths",
            "levels",
            "reference_level",
            "p_exponents",
            "mollify_level",
            "test_functions",
            "maximal",
            "out_dir",
            "tolerances",
        ):
            if key in doc:
                merged[key] = doc[key]
            elif key in dft:
                merged[key] = dft[key]
        merged["chart_radius"] = doc.get("chart_radius", dft.get("chart_radius", merged["R"] + 1.5))
        merged["chart_nodes"] = doc.get("chart_nodes", dft.get("chart_nodes", 9))
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        steps = self.T / self.h
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ConfigError(f"T/h must be a positive integer (T={self.T}, h={self.h})")
        if self.grid_nodes < 3:
            raise ConfigError("grid_nodes must be at least 3")
        if sorted(self.levels) != list(self.levels):
            raise ConfigError("mollification levels must be ascending")
        if self.chart_radius < self.R:
            raise ConfigError("chart must cover the experiment ball")

    def scenario_obj(self):
        return get_scenario(self.scenario)

    def provenance(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed_base": self.seed_base,
            "T": self.T,
            "h": self.h,
            "R": self.R,
            "grid_nodes": self.grid_nodes,
        }


def _smooth_drift_of(cfg: ScenarioConfig):
    scn = cfg.scenario_obj()
    if scn.smooth_drift:
        return scn.drift, None
    level = cfg.mollify_level
    return mollify_drift(scn.drift, level, MollifierSpec(dim=scn.d)), level


def _write_summary(outdir: Path, name: str, payload: dict, started: float) -> Path:
    payload = dict(payload)
    payload["schema_version"] = SCHEMA_VERSION
    payload["meta"] = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_seconds": round(time.time() - started, 3),
    }
    path = outdir / f"{name}_summary.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _test_functions(cfg: ScenarioConfig, d: int):
    if cfg.test_functions:
        return [
            TestFunction(tuple(tf["center"]), float(tf["radius"]), float(tf.get("amplitude", 1.0)))
            for tf in cfg.test_functions
        ]
    return [TestFunction((0.0,) * d, 1.2, 1.0)]


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg: ScenarioConfig, outdir: Path) -> tuple:
    scn = cfg.scenario_obj()
    drift, level = _smooth_drift_of(cfg)
    path = sample_path(cfg.seed_base, scn.m, cfg.T, cfg.h)
    chart_grid = BoxGrid.cube(scn.d, cfg.chart_radius, cfg.chart_nodes)
    spec = ChartSpec(chart_grid, path, scn.fields)
    pts, wts, _ = ball_grid(scn.d, cfg.R, cfg.grid_nodes)
    store_every = max(1, path.steps // 8)
    y = lagrangian_flow(pts, wts, spec, drift, store_every=store_every)
    x = compose(spec, y)
    y.to_csv(outdir / "simulate_flow.csv")
    x.to_csv(outdir / "simulate_composed.csv")

    rho = y.rho()
    rho_positive = bool(np.all(rho > 0))
    reciprocity = float(np.max(np.abs(rho * y.rho_tilde_at_images() - 1.0)))

    sup_error = None
    if scn.smooth_drift:
        errs = []
        for i, x0 in enumerate(pts):
            tr = direct_flow(x0, path, scn.fields, drift, thin=store_every)
            errs.append(float(np.max(np.linalg.norm(tr.states - x.states[:, i, :], axis=-1))))
        sup_error = max(errs)

    ok = rho_positive and reciprocity <= 1e-6
    summary = {
        "command": "simulate",
        "provenance": cfg.provenance(),
        "n_mollify": level,
        "rho_positive": rho_positive,
        "reciprocity_max_deviation": reciprocity,
        "sup_errors": {"decomposition_vs_direct": sup_error},
        "invariants_ok": bool(ok),
    }
    return summary, ok


def cmd_stability(cfg: ScenarioConfig, outdir: Path) -> tuple:
    scn = cfg.scenario_obj()
    report = stability_experiment(
        scn,
        cfg.levels,
        cfg.paths,
        p_list=cfg.p_exponents,
        T=cfg.T,
        h=cfg.h,
        R=cfg.R,
        grid_nodes=cfg.grid_nodes,
        seed_base=cfg.seed_base,
        reference_level=cfg.reference_level,
    )
    rows = []
    for il, n in enumerate(report.levels):
        for ip in range(report.paths):
            rows.append((cfg.seed_base + ip, n, report.D1_per_path[il, ip]))
    np.savetxt(
        outdir / "stability_per_path.csv",
        np.asarray(rows),
        delimiter=",",
        header="path_seed,level,D1",
        comments="",
    )
    summary = {
        "command": "stability",
        **report.to_json_dict(),
        "wall_times": list(report.wall_times),
        "invariants_ok": bool(report.monotone and report.ratio_ok),
    }
    return summary, report.monotone and report.ratio_ok


def cmd_invert(cfg: ScenarioConfig, outdir: Path) -> tuple:
    scn = cfg.scenario_obj()
    drift, level = _smooth_drift_of(cfg)
    tol = float(cfg.tolerances.get("roundtrip_median", 1e-2))
    halvings = int(cfg.tolerances.get("halvings", 0))
    pts, wts, _ = ball_grid(scn.d, cfg.R, cfg.grid_nodes)

    medians = []
    hs = [cfg.h / 2**j for j in range(halvings + 1)]
    base = sample_path(cfg.seed_base, scn.m, cfg.T, cfg.h)
    path = base
    for j, h in enumerate(hs):
        if j > 0:
            from .brownian import refine

            path = refine(path)
        # refine the chart spacing with sqrt(h) so its interpolation bias
        # (quadratic in the spacing) decays linearly with the step
        nodes_j = int(np.ceil((cfg.chart_nodes - 1) * 2 ** (j / 2))) + 1
        chart_grid = BoxGrid.cube(scn.d, cfg.chart_radius, nodes_j)
        spec = ChartSpec(chart_grid, path, scn.fields)
        y = lagrangian_flow(pts, wts, spec, drift, store_every=path.steps)
        x = compose(spec, y)
        xT = x.states[-1]
        back = inverse_flow(xT, wts, chart_grid, path, scn.fields, drift)
        err = np.linalg.norm(back.states[-1] - pts, axis=-1)
        medians.append(float(np.median(err)))
    floor = 1e-12  # decrease is vacuous once the roundtrip hits rounding noise
    decreasing = all(b < a or b <= floor for a, b in zip(medians, medians[1:]))
    ok = medians[-1] <= tol and (halvings == 0 or decreasing)
    np.savetxt(
        outdir / "invert_medians.csv",
        np.asarray(list(zip(hs, medians))),
        delimiter=",",
        header="h,median_roundtrip_error",
        comments="",
    )
    summary = {
        "command": "invert",
        "provenance": cfg.provenance(),
        "n_mollify": level,
        "h_levels": hs,
        "roundtrip_medians": medians,
        "decreasing": bool(decreasing),
        "invariants_ok": bool(ok),
    }
    return summary, ok


def cmd_transport(cfg: ScenarioConfig, outdir: Path) -> tuple:
    scn = cfg.scenario_obj()
    drift, level = _smooth_drift_of(cfg)
    tol = float(cfg.tolerances.get("weak_residual", 5e-2))
    tests = _test_functions(cfg, scn.d)
    theta0 = bump_theta((0.0,) * scn.d, 1.0, 1.0)
    src_box = BoxGrid.cube(scn.d, cfg.chart_radius, 41)
    paths = [sample_path(cfg.seed_base + i, scn.m, cfg.T, cfg.h) for i in range(cfg.paths)]

    rows = []
    finals_ito, finals_rand = [], []
    for tf in tests:
        ito = ito_weak_residual(theta0, tf, scn.fields, drift, paths, source_box=src_box)
        finals_ito.append(ito.final_mean())
        chart_grid = BoxGrid.cube(scn.d, cfg.chart_radius, cfg.chart_nodes)
        chart = DiffusionChart(chart_grid, paths[0], scn.fields)
        rand = random_transport_check(theta0, tf, chart, drift, source_box=src_box)
        finals_rand.append(rand.final_mean())
        for ip, p in enumerate(paths):
            for jt in range(len(ito.times)):
                if jt % max(1, len(ito.times) // 16):
                    continue
                rows.append(
                    (
                        p.seed,
                        ito.times[jt],
                        ito.residuals[ip, jt],
                        rand.residuals[0, jt] if ip == 0 else np.nan,
                    )
                )
    np.savetxt(
        outdir / "transport_residuals.csv",
        np.asarray(rows),
        delimiter=",",
        header="path_seed,t,residual_ito_weak,residual_random_transport",
        comments="",
    )
    dens = density_evolution_check(
        tests[0],
        DiffusionChart(BoxGrid.cube(scn.d, cfg.chart_radius, cfg.chart_nodes), paths[0], scn.fields),
        source_box=src_box,
    )
    ok = max(finals_ito) <= tol and max(finals_rand) <= tol
    summary = {
        "command": "transport",
        "provenance": cfg.provenance(),
        "n_mollify": level,
        "ito_weak_final_mean": finals_ito,
        "random_transport_final": finals_rand,
        "density_evolution_final": dens["final_residual"],
        "tolerance": tol,
        "note": "residuals certify refinement decay, not uniqueness",
        "invariants_ok": bool(ok),
    }
    return summary, ok


def cmd_lipschitz(cfg: ScenarioConfig, outdir: Path) -> tuple:
    scn = cfg.scenario_obj()
    drift_rough = scn.drift
    drift, level = _smooth_drift_of(cfg)
    eps_frac = float(cfg.maximal.get("eps_fraction", 0.1))
    radii_count = int(cfg.maximal.get("radii_count", 16))
    path = sample_path(cfg.seed_base, scn.m, cfg.T, cfg.h)
    L = 3.0 * cfg.R
    offset = (L / (cfg.grid_nodes - 1)) / 3.0  # keep nodes off the drift's singular set
    box = BoxGrid.cube(scn.d, L, cfg.grid_nodes, center=[offset] * scn.d)
    chart_grid = BoxGrid.cube(scn.d, cfg.chart_radius, cfg.chart_nodes)
    chart = DiffusionChart(chart_grid, path, scn.fields)
    pts = box.points()
    rows_store = max(1, path.steps // 8)
    flow = lagrangian_flow(
        pts, np.full(len(pts), float(np.prod(box.spacing))), chart, drift,
        store_every=rows_store, box=box,
    )

    grad_source = (
        drift_rough.grad_norm
        if isinstance(drift_rough, RoughDrift) and drift_rough.grad_norm is not None
        else (lambda x: np.linalg.norm(drift.jacobian(x), axis=(-2, -1)))
    )

    def grad_norm_of(step, x):
        phi = chart.phi(float(step), x)
        return grad_source(phi)

    def div_of(step, x):
        phi = chart.phi(float(step), x)
        div_K = chart.div_inverse_jacobian(float(step), x)
        return np.einsum("...i,...i->...", div_K, drift.value(phi)) + drift.divergence(phi)

    import math

    eps = eps_frac * math.pi ** (scn.d / 2) / math.gamma(scn.d / 2 + 1) * cfg.R**scn.d
    report = lipschitz_set(flow, grad_norm_of, div_of, eps, cfg.R, radii_count=radii_count)

    mask_grid = ScalarGrid(box, report.mask.astype(float))
    mask_grid.to_csv(outdir / "lipschitz_mask.csv")
    mask_grid.to_raster(outdir / "lipschitz_mask.rfgr")
    x = compose(ChartSpec(chart_grid, path, scn.fields), flow, rows=[len(flow.times) - 1])
    sv = np.linalg.svd(chart.K[path.steps], compute_uv=False)
    lip_phi = float(np.max(1.0 / sv[..., -1]))
    diff = approx_diff_check(
        x.states[-1], box, report.mask, lip_phi, report.empirical_lipschitz
    )
    ok = (
        report.excluded_measure <= eps + report.cell_volume + 1e-12
        and report.lipschitz_within_bound()
        and diff.stable_fraction >= 0.9
    )
    summary = {
        "command": "lipschitz",
        "provenance": cfg.provenance(),
        "n_mollify": level,
        "eps": eps,
        **report.summary(),
        "approx_diff": {
            "stable_fraction": diff.stable_fraction,
            "empirical_lipschitz": diff.empirical_lipschitz,
            "product_bound": diff.product_bound,
            "interior_points": diff.interior_points,
        },
        "invariants_ok": bool(ok),
    }
    return summary, ok


def cmd_identities(cfg: ScenarioConfig, outdir: Path) -> tuple:
    tol = float(cfg.tolerances.get("identities", 1e-3))
    snap = sine_perturbation_map(0.1)
    box = BoxGrid.cube(2, 2.0, 21)
    pts = box.points()

    from .fields import SmoothVectorField

    def b_value(x):
        return np.stack([x[..., 1] ** 2, x[..., 0]], axis=-1)

    def b_jac(x):
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 2.0 * x[..., 1]
        J[..., 1, 0] = 1.0
        return J

    b = SmoothVectorField(dim=2, value=b_value, jacobian=b_jac, name="quadratic-swap")
    chain = check_bv_chain_rule(b, snap, pts, fd_step=1e-5)
    det_rep = check_det_gradient_identity(snap, pts, fd_step=1e-4)

    # volume factor of a one-dimensional saturated flow against its determinant
    f1 = tanh_field_1d(0.8)
    path = sample_path(cfg.seed_base, 1, 1.0, 2.0**-9)
    tr = direct_flow(np.array([0.3]), path, [f1], None)
    liouville_gap = float(
        np.max(np.abs(tr.dets - np.exp(tr.liouville_log)) / np.abs(tr.dets))
    )

    ok = (
        chain.max_residual <= tol
        and det_rep.max_residual_gradient <= tol
        and det_rep.max_residual_cofactor <= tol
        and liouville_gap <= 50 * path.h
    )
    summary = {
        "command": "identities",
        "provenance": cfg.provenance(),
        "chain_rule_residual": chain.max_residual,
        "det_gradient_residual": det_rep.max_residual_gradient,
        "det_cofactor_residual": det_rep.max_residual_cofactor,
        "liouville_relative_gap": liouville_gap,
        "tolerance": tol,
        "invariants_ok": bool(ok),
    }
    return summary, ok


def cmd_calibrate(cfg: ScenarioConfig, outdir: Path) -> tuple:
    d = cfg.scenario_obj().d
    a = calibrate_constants(d=d, seed=cfg.seed_base or 2024)
    b = calibrate_constants(d=d, seed=(cfg.seed_base or 2024) + 5753)
    pa = calibrate_pointwise(d=d, seed=cfg.seed_base or 2024)
    pb = calibrate_pointwise(d=d, seed=(cfg.seed_base or 2024) + 5753)
    ratios = {
        "weak_type": a["weak_type_max"] / b["weak_type_max"],
        "llogl": a["llogl_max"] / b["llogl_max"],
        "pointwise": pa["pointwise_max"] / pb["pointwise_max"],
    }
    ok = all(0.67 <= r <= 1.5 for r in ratios.values())
    frozen_ok = (
        max(a["weak_type_max"], pa["pointwise_max"]) <= constants.C_D[d]
        and a["llogl_max"] <= constants.C_LOG[d]
    )
    summary = {
        "command": "calibrate",
        "dim": d,
        "primary": {**a, "pointwise_max": pa["pointwise_max"]},
        "disjoint": {**b, "pointwise_max": pb["pointwise_max"]},
        "stability_ratios": ratios,
        "frozen": {"C_d": constants.C_D[d], "C_log": constants.C_LOG[d]},
        "frozen_dominates": bool(frozen_ok),
        "invariants_ok": bool(ok and frozen_ok),
    }
    return summary, ok and frozen_ok


COMMANDS = {
    "simulate": cmd_simulate,
    "stability": cmd_stability,
    "invert": cmd_invert,
    "transport": cmd_transport,
    "lipschitz": cmd_lipschitz,
    "identities": cmd_identities,
    "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="roughflow",
        description="Batch experiments for rough-drift stochastic flows",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="seed_base override")
    args = parser.parse_args(argv)

    started = time.time()
    try:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = ScenarioConfig.from_json(doc)
    except UnknownScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_SCENARIO
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.seed is not None:
        cfg.seed_base = args.seed
    outdir = Path(args.out or os.environ.get("ROUGHFLOW_OUT", cfg.out_dir))
    outdir.mkdir(parents=True, exist_ok=True)

    try:
        summary, ok = COMMANDS[args.command](cfg, outdir)
    except (ChartExhaustedError, OutOfChartError, NewtonNoConvergenceError,
            SingularJacobianError, MemoryError) as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE

    path = _write_summary(outdir, args.command, summary, started)
    print(f"{args.command}: {'ok' if ok else 'INVARIANT FAILED'} -> {path}")
    return EXIT_OK if ok else EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
