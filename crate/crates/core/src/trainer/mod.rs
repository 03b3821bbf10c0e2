//! Phase-by-phase training, AdamW, checkpoints and reverse-objective
//! continuation.

mod checkpoint;
mod config;
mod cross;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, RunRngState, FORMAT_VERSION, MAGIC};
pub use config::{
    recipe_run, Arch, InitFrom, OptimizerConfig, PhaseConfig, RecipeOptions, TrainRunConfig,
};
pub use cross::{cross_objective_continue, ContinueOptions, ContinueTarget};
pub use optim::{adamw_step, global_norm, AdamState};
pub use train::{read_metrics, train, MetricRecord, RunDir, TrainOutcome, Trainer};
