//! Identification of linear and residual recurrent state-space models from
//! input/output data by open-loop simulation-error minimization, with
//! elastic-net and group-Lasso regularization handled through a
//! variable-splitting reformulation solved by a bound-constrained
//! limited-memory quasi-Newton method, plus EKF/RTS initial-state
//! reconstruction for validation data.

pub mod datasets;
pub mod error;
pub mod estimation;
pub mod gradient;
pub mod io;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod split;
pub mod trainer;

pub use datasets::{
    export_csv, gen_causal, gen_input_selection, gen_order_reduction, load_csv, load_sidecar,
    spectral_radius, CsvSidecar, Dataset, Experiment, GeneratorDescriptor, LinearSystem,
};
pub use error::{Result, SysidError};
pub use estimation::{
    ekf_output_disturbance_predict, ekf_p_step_r2, ekf_rts_detailed, ekf_rts_reconstruct,
    refine_x0, Cov, EkfConfig, SmootherTrace,
};
pub use io::SavedModel;
pub use gradient::{loss_and_grad, output_jacobian, state_jacobian, x0_loss_and_grad, LossGradient};
pub use model::{
    output_map, simulate, simulate_from, soft_sat, soft_sat_scalar, step_state, Activation,
    EntryMask, Layer, ModelParams, ModelSpec, ParamLayout, SatBound, SatMode, SaturationConfig,
    StructureMask,
};
pub use objectives::{
    build_groups, mse_loss, r2_average, r2_scores, regularizer_subgrad, regularizer_value,
    GroupIndexSet, GroupKind, RegularizationConfig, Scaling,
};
pub use optim::{
    adam_minimize, lbfgsb_minimize, AdamOptions, IterationLog, LbfgsbOptions, SolveResult,
    SolveStatus,
};
pub use split::{
    build_elastic_net_split, build_group_lasso_split, map_box_bounds, Bounds, RegIndexSets,
    SplitMap, SplitProblem, EPS_FLOOR,
};
pub use trainer::{
    evaluate, fit, fit_with_progress, multi_start_presample, EvalReport, FitReport, Phase,
    ProgressEvent, Selection, StartSummary, Timings, TrainConfig, X0Mode, X0Policy,
};
