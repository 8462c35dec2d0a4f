//! Training, evaluation, checkpoints and the ablation grid.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod explain;
mod ledger;
mod optim;
mod scoring;
mod trainer;

pub use ablation::{ablation_grid, final_accuracy, median, run_configs, AblationCell, AblationRun, AblationTable};
pub use checkpoint::{Checkpoint, CheckpointHeader, TensorInfo};
pub use config::{Positives, TrainConfig};
pub use eval::{argmax_lowest, evaluate, Classifier, ConfusionMatrix, Evaluation};
pub use explain::{explain_match, MatchExplanation};
pub use ledger::{EpochRecord, RunLedger, StepRecord};
pub use optim::{AdamW, CosineSchedule, BETA1, BETA2, EPSILON};
pub use scoring::{score_grid, GridGrads};
pub use trainer::{class_captions, train, TrainOutcome, Trainer};
