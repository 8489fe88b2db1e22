"""roughflow: a desk-scale laboratory for Stratonovich flows with rough drifts."""

from .brownian import BrownianPath, refine, reverse, sample_path
from .fields import (
    MollifierSpec,
    RoughDrift,
    SmoothVectorField,
    growth_report,
    mollified_divergence_bound,
    mollify_drift,
)
from .sde_core import (
    BoxGrid,
    DiffusionChart,
    FlowTrajectory,
    diffusion_flow,
    direct_flow,
    heun_step,
)
from .decomposition import (
    ChartSpec,
    FlowField,
    TransformedDrift,
    compose,
    forward_density,
    lagrangian_flow,
)
from .scenarios import Scenario, get_scenario, scenario_names

__version__ = "0.1.0"
