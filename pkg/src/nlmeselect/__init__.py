"""Covariate and correlation selection for nonlinear mixed-effects models.

The package solves an L1-penalized maximum-likelihood problem with a
stochastic proximal-gradient solver (Metropolis-refreshed sufficient
statistics, adaptive per-coordinate steps, soft-thresholding) and calibrates
the two penalty strengths by minimizing BIC with a particle swarm that
warm-restarts the solver between evaluations.
"""

from .likelihood import (
    BICReport,
    ISConfig,
    LogLikEstimate,
    SupportMask,
    bic,
    evaluate_bic,
    loglik_is,
    refit_support,
    support_of,
)
from .mcmc import ChainState, SuffStats, init_chain, mh_sweep, suffstats_from_sample
from .model import (
    Dataset,
    ModelDims,
    PenaltyWeights,
    StackedData,
    SubjectRecord,
    ThetaParams,
    assemble_omega,
    build_design_matrix,
    complete_loglik,
    decompose_omega,
    design_matvec,
    design_rmatvec,
    standardize_covariates,
)
from .pso import (
    GridResult,
    PSOConfig,
    SwarmResult,
    estimate_lambda_max,
    grid_search,
    inertia_weight,
    pso_minimize,
    pso_select,
    velocity_position_update,
    warm_restart_delta_schedule,
)
from .sapg import (
    Penalty,
    SAPGConfig,
    SAPGResult,
    SolverError,
    compute_gradients,
    default_theta,
    penalized_sa_objective,
    sa_objective,
    sa_step,
    sa_update,
    sapg_run,
    soft_threshold,
    step_sizes,
)
from .simulate import (
    GroundTruth,
    SimScenario,
    default_scenario,
    simulate_covariates,
    simulate_dataset,
)
from .structural import (
    DosingRegimen,
    PKParams,
    StructuralModel,
    TwoCompartmentModel,
    pk2_amounts,
    pk2_concentration,
    rk4_reference,
)

__version__ = "0.1.0"
