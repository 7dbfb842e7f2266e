"""Deterministic remote entanglement by half-parity measurement feedback.

Simulates two qubits monitored through the half-parity observable
X = (sz1 + sz2)/2 and steered toward the odd-parity triplet target by local
symmetric y rotations, from idealized discrete rounds through continuous
proportional feedback to experimentally realistic delayed, filtered and
decohering trajectories.
"""

from .measurement import (
    ImpossibleOutcomeError,
    MeasurementConfig,
    completeness_residual,
    continuous_step,
    discrete_update,
    outcome_density,
    povm_operator,
    sample_outcome,
)
from .feedback import (
    AsloFeedback,
    NoFeedback,
    ProportionalFeedback,
    TableFeedback,
    ThresholdFeedback,
    analytic_eta1,
    p_opt_from_avg_state,
    semiclassical_rule,
    steady_state_fidelity_fixed_p,
    steady_state_fidelity_threshold,
    theta_opt,
    v_threshold_opt,
    wiseman_milburn_step,
)
from .averaging import (
    AverageRun,
    FeedbackTable,
    QuadratureError,
    average_continuous_step,
    average_discrete_step,
    build_feedback_table,
    run_average_protocol,
    run_threshold_mc,
)
from .hybrid import (
    OptimizeResult,
    Schedule,
    evaluate_schedule,
    optimize_schedule,
)
from .experiment import (
    DecoherenceParams,
    EnsembleResult,
    ExperimentConfig,
    PostSelection,
    TrajectoryRecords,
    extract_p_schedule,
    locally_optimal_trajectory,
    post_select,
    run_ensemble,
)
from .states import (
    StateError,
    apply_symmetric_y_rotation,
    concurrence,
    fidelity_after_rotation,
    fidelity_t0,
    is_01_symmetric,
    mixed_triplet,
    psi0,
    pure,
    rotation_matrix,
    singlet,
    t_minus,
    t_plus,
    t_zero,
    validate_state,
)

__version__ = "0.1.0"
