//! Training loop, metrics, sweeps and reporting.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{BackboneSpec, ExperimentConfig, GenerationSpec, SweepGrid};
pub use optim::{OptimizerConfig, RmsProp};
pub use sweep::{run_sweep, MatrixInputs, SweepOutcome, SweepRow};
pub use train::{
    evaluate, evaluate_test, load_model, per_class_report, predict_scores, save_model, train, write_history,
    EpochRecord, Evaluation, ModelMeta, PerClassRow, TrainedModel, DECISION_THRESHOLD,
};
