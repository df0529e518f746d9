//! Loss, optimizers, learning-rate schedule, metrics and the training loop.

mod loss;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use loss::{bce_loss, sigmoid};
pub use metrics::{auc, auc_trapezoid, metrics, roc_curve, EvalReport};
pub use optim::{clip_grad_norm, Optimizer};
pub use schedule::{lr_at, OptimizerKind, TrainConfig};
pub use trainer::{evaluate, log_csv, predict_probs, train, train_step, EpochLog, TrainOutcome, LOG_HEADER};
