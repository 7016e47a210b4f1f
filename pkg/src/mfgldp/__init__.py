"""Large deviations laboratory for finite discrete-time mean-field games."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ConfigParseError,
    ModelError,
    ModelSpec,
    PolicyUnresolved,
    Space,
    build_kappa,
    gamma_map,
    load_model,
    make_model,
    mean_field_flow,
    transition_kernel,
    validate_model,
)
from .mfe import MFEResult, solve_mfe  # noqa: E402
from .noise import NoiseDriver  # noqa: E402
from .entropy import (  # noqa: E402
    BridgeResult,
    MarkovPathMeasure,
    i_project_exact,
    joint_from,
    markovianize,
    relative_entropy,
    reverse_kernel,
    sinkhorn_bridge,
)
from .rates import (  # noqa: E402
    RateReport,
    ball_rate_inf,
    dv_lower_bound,
    j_rate,
    marginal_j_rate,
    path_rate,
    prop1_residual,
    v_rate,
)
from .particles import (  # noqa: E402
    EmpiricalFlow,
    EnsembleTrace,
    EventSpec,
    LDPResult,
    estimate_probability,
    ldp_slope,
    lln_curve,
    load_trace,
    phi_check,
    save_trace,
    simulate,
    simulate_counts,
)

__all__ = [
    "ConfigParseError",
    "ModelError",
    "ModelSpec",
    "PolicyUnresolved",
    "Space",
    "build_kappa",
    "gamma_map",
    "load_model",
    "make_model",
    "mean_field_flow",
    "transition_kernel",
    "validate_model",
    "MFEResult",
    "solve_mfe",
    "NoiseDriver",
    "BridgeResult",
    "MarkovPathMeasure",
    "i_project_exact",
    "joint_from",
    "markovianize",
    "relative_entropy",
    "reverse_kernel",
    "sinkhorn_bridge",
    "RateReport",
    "ball_rate_inf",
    "dv_lower_bound",
    "j_rate",
    "marginal_j_rate",
    "path_rate",
    "prop1_residual",
    "v_rate",
    "EmpiricalFlow",
    "EnsembleTrace",
    "EventSpec",
    "LDPResult",
    "estimate_probability",
    "ldp_slope",
    "lln_curve",
    "load_trace",
    "phi_check",
    "save_trace",
    "simulate",
    "simulate_counts",
]
