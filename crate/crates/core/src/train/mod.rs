//! Loss, optimizer, the early-stopping fit loop and evaluation.

mod fit;
mod loss;
mod optim;

pub use fit::{evaluate, fit, Evaluation, TrainConfig, TrainReport, EpochRecord, StopReason, Monitor};
pub use loss::{cross_entropy, softmax_cross_entropy_grad, CLAMP};
pub use optim::{sgd_momentum_step, EarlyStopping, Sgd};
