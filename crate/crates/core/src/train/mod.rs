//! Optimization loop, evaluation, and checkpoint persistence.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{lr_at, Schedule, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
pub use trainer::{
    argmax, checkpoint_path, evaluate_top1, train, EpochRecord, TrainLog, Trainer, LOG_FILE,
    LOG_HEADER,
};
