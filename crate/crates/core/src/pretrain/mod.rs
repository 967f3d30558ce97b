//! Pre-training: AdamW, token-denominated cosine schedule, gradient
//! clipping, FP8 emulation and the curriculum-driven training loop.

pub mod fp8;
mod optim;
mod schedule;
mod trainer;

pub use optim::{adamw_step, clip_grad_norm, global_norm, OptimHyper, OptimizerState};
pub use schedule::{cosine_lr, LrSchedule};
pub use trainer::{
    batch_loss_and_grads, pretrain, shard_gradients_equivalence, train_step, validation_loss,
    LogRecord, TokenizedSources, TrainPlan,
};
