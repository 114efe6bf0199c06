//! Training-time machinery: schedule, optimizer, checkpoints, the MNSP step
//! and the loop around it.

pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod optim;
pub mod schedule;
pub mod step;

pub use checkpoint::{Checkpoint, Dtype};
pub use config::{PretrainConfig, PretrainFlags, StepPlan, TeacherMode};
pub use engine::{read_metrics, run_pretraining, MetricsRow, PretrainOutcome, RunOptions, Trainer};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::lr_schedule;
pub use step::{compute_targets, pretrain_step, sample_losses, LossVars, MnspModel, StepResult, Targets};
