//! Losses, backpropagation, Adam and the training loops.

mod adam;
mod backward;
mod gradcheck;
mod loss;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use backward::{backward, objective_value, Batch, Gradients, L2Scope, LossKind, Objective};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use loss::{kd_loss, metrics, mse, Metrics};
pub use trainer::{
    distill, evaluate, predict, save_history, train_mse, train_teacher, write_history_csv, EpochReport, Teacher,
    TrainConfig,
};
