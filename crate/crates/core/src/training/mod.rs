//! Objective, optimizer and the training loop.

mod config;
mod example;
mod loss;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use example::{build_training_example, TrainingExample};
pub use loss::{loss_context, loss_next, objective, LossParts, TargetRole, Targets};
pub use optim::{clip_grad_norm, AdamW, AdamWSettings, LrSchedule};
pub use trainer::{accumulate_example, evaluate_loss, LabeledGrid, TrainMetrics, Trainer};
