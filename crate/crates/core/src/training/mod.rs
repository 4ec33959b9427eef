//! Optimizers, loss assembly and staged training pipelines.

pub mod loss;
pub mod optim;
pub mod pipeline;

pub use loss::{assemble_loss, l2_penalty, LossTerms};
pub use optim::{
    adam_step, clip_gradients, clip_store_gradients, global_norm, sgd_momentum_step, LrSchedule, OptimState,
    OptimizerConfig,
};
pub use pipeline::{
    evaluate, incremental_schedule, relaxation_pipeline, run_pipeline, train_step, two_phase_schedule,
    write_metrics_csv, ConvergenceMonitor, DataValidator, Evaluation, History, MetricsRow, NoObserver, Observer,
    PhaseRecord, PhaseSpec, PipelineSpec, RelaxationBudgets, Scope, StepOutcome, StopRule, TrainConfig, TrainData,
    TrainMeta, TrainState, TwoPhaseRule, Validator, METRICS_HEADER,
};
