"""Numerical laboratory for geodesic return dynamics near a submanifold.

The package bundles a small zoo of explicit surface models, a cotangent
geodesic integrator with variational jets, detection of geodesics that
leave a submanifold conormally and return to it, two families of compactly
supported metric perturbations (pulled-back coordinate changes and
conformal factors), and exactly summable spectral comparison series on the
flat torus and the round sphere.  Everything downstream of the integrator
is deterministic for fixed seeds so runs can be archived and diffed.
"""

from .charts import (
    Box,
    ManifoldModel,
    MetricChart,
    MODEL_NAMES,
    affine_rescale_chart,
    export_grid_csv,
    hamilton_field,
    make_model,
    model_from_config,
    scale_chart,
    symbol,
)
from .errors import (
    ChartDomainError,
    ConfigError,
    ConormalLabError,
    EventDetectionError,
    IntegrationError,
    PerturbationError,
    SearchError,
)
from .flow import (
    FlowJet,
    PhasePoint,
    Trajectory,
    gauss_curvature,
    homogeneity_check,
    integrate,
    integrate_dense,
    integrate_jet,
    jacobi_residual,
    symplectic_defect,
    trajectory_to_csv,
)
from .conormal import (
    ConormalPoint,
    ReturnEvent,
    Submanifold,
    closed_normal_scan,
    conormal_lift,
    find_returns,
    return_table_csv,
    sigma_from_config,
    transversality_defect,
)
from .fermi import FermiFrame, fermi_chart, fermi_frame, fermi_point
from .diffeo import (
    DiffeoParams,
    SeparationResult,
    pullback_metric,
    separate_closed_geodesic,
    separation_score,
    tau_F,
    tau_F_param_jacobian,
)
from .conformal import (
    BreakLoopResult,
    ConformalParams,
    EndpointReport,
    TailScaffold,
    break_loop,
    endpoint_jacobian,
    epsilon_error_curve,
    linear_response,
    second_pass_cancellation,
    target_loop_tail,
)
from .kuznecov import (
    KuznecovSeries,
    fit_leading,
    individual_bound_check,
    oscillation_spectrum,
    sphere_series,
    torus_series,
)
from .scenarios import ScenarioReport, list_builtin, run, verify_all

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ManifoldModel",
    "MetricChart",
    "MODEL_NAMES",
    "affine_rescale_chart",
    "export_grid_csv",
    "hamilton_field",
    "make_model",
    "model_from_config",
    "scale_chart",
    "symbol",
    "ConormalLabError",
    "ChartDomainError",
    "ConfigError",
    "EventDetectionError",
    "IntegrationError",
    "PerturbationError",
    "SearchError",
    "FlowJet",
    "PhasePoint",
    "Trajectory",
    "gauss_curvature",
    "homogeneity_check",
    "integrate",
    "integrate_dense",
    "integrate_jet",
    "jacobi_residual",
    "symplectic_defect",
    "trajectory_to_csv",
    "ConormalPoint",
    "ReturnEvent",
    "Submanifold",
    "closed_normal_scan",
    "conormal_lift",
    "find_returns",
    "return_table_csv",
    "sigma_from_config",
    "transversality_defect",
    "FermiFrame",
    "fermi_chart",
    "fermi_frame",
    "fermi_point",
    "DiffeoParams",
    "SeparationResult",
    "pullback_metric",
    "separate_closed_geodesic",
    "separation_score",
    "tau_F",
    "tau_F_param_jacobian",
    "BreakLoopResult",
    "ConformalParams",
    "EndpointReport",
    "TailScaffold",
    "break_loop",
    "endpoint_jacobian",
    "epsilon_error_curve",
    "linear_response",
    "second_pass_cancellation",
    "target_loop_tail",
    "KuznecovSeries",
    "fit_leading",
    "individual_bound_check",
    "oscillation_spectrum",
    "sphere_series",
    "torus_series",
    "ScenarioReport",
    "list_builtin",
    "run",
    "verify_all",
    "__version__",
]
