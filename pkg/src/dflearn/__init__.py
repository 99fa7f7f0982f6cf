"""Decision-focused learning for combinatorial optimization.

Predictive models are trained end to end through differentiable continuous
relaxations of their downstream decision problems: a gamma-regularized QP
layer for LP-representable problems and a multilinear-extension layer for
budgeted coverage maximization.  A benchmark harness compares decision-focused
training against the classical two-stage approach on three synthetic domains.
"""

from .coverage import (
    CoverageDuals,
    CoverageInstance,
    FractionalPoint,
    NoConvergenceWarning,
    NotStationary,
    TooLarge,
    backward_submod,
    brute_force_select,
    coverage_value,
    discrete_oracles,
    extension_grad_x,
    extension_hessian_x,
    extension_value,
    extension_value_monte_carlo,
    grad_theta_of_grad_x,
    greedy_select,
    load_coverage,
    pipage_round,
    project_capped_simplex,
    recover_duals,
    save_coverage,
    sga_maximize,
)
from .domains import (
    DatasetInstance,
    ParseError,
    RangeError,
    gen_bipartite_matching,
    gen_budget_allocation,
    gen_diverse_recommendation,
    load_instance,
    matching_to_qp,
    save_instance,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunResult,
    export_predictions,
    run_experiment,
    summarize,
)
from .kkt import DegenerateKktWarning, SingularSystem
from .metrics import (
    DegenerateLabels,
    InfeasibleDecision,
    auc,
    bootstrap_ci,
    cross_entropy,
    decision_quality,
    mse,
)
from .models import (
    AdamState,
    DomainError,
    Mlp,
    ShapeMismatch,
    adam_step,
    init_adam,
    init_mlp,
    load_model,
    mlp_backward,
    mlp_forward,
    save_model,
    two_stage_loss,
)
from .qp import (
    Infeasible,
    InfeasibleRows,
    IntegralStructure,
    LayerSolution,
    NoConvergence,
    QpProblem,
    UnsupportedStructure,
    backward_qp,
    load_problem,
    reduce_rows,
    save_problem,
    solve_integral,
    solve_qp,
)
from .training import decision_grad_theta, evaluate_model, train_model

__version__ = "0.1.0"
