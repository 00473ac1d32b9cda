"""Continual dynamics-learning benchmark with flow-matching action transformation.

A planner-in-the-loop ground-vehicle simulation where the world's control
gains shift mid-task: an ensemble dynamics model adapts online from single
transitions while a learned conditional flow transforms planned actions
whenever the model's one-step predictions drift past a misalignment
threshold. Includes the MPPI planner, the streaming-update baseline, and an
experiment harness for suite execution, aggregation, and loss-curve export.
"""

from .base import BaseEstimator, NotFittedError, NumericalError
from .bench import (
    DEFAULT_SCENARIOS,
    SuiteConfig,
    SuiteResults,
    aggregate,
    export_loss_curves,
    load_config,
    moving_average,
    read_records,
    run_suite,
    write_summary_csv,
)
from .dynamics import (
    ACTION_BOUNDS,
    DEFAULT_DT,
    EnsembleDynamicsModel,
    Transition,
    UgvAction,
    UgvState,
    dubins_step,
    generate_dynamics_dataset,
    state_features,
    train_initial_dynamics,
    wrap_angle,
)
from .flow import (
    ActionFlowTransformer,
    CounterfactualSample,
    MisalignmentMonitor,
    cfm_loss,
    counterfactual_batch,
    generate_counterfactual_samples,
    midpoint_integrate,
    monitor_step,
    state_diff,
    train_action_transformer,
    transform_action,
    velocity,
)
from .nn import (
    AdamState,
    MlpParams,
    MlpSpec,
    RunningMoments,
    adam_init,
    adam_step,
    gaussian_nll,
    init_params,
    layer_norm,
    mlp_backward,
    mlp_forward,
    mse,
)
from .planning import (
    CostSpec,
    MppiConfig,
    MppiPlanner,
    Plan,
    mppi_plan,
    rollout,
    shift_nominal,
    softmin_weights,
    trajectory_cost,
)
from .simulation import (
    EpisodeConfig,
    EpisodeResult,
    Method,
    Scenario,
    TrackMap,
    active_gains,
    bundled_track,
    env_step,
    load_track,
    run_episode,
    save_track,
    waypoint_check,
)
from .streaming import StreamXState, scaled, streamx_init, streamx_update, trace_update

__version__ = "0.1.0"
