//! A small dense-network substrate trained in 64-bit floats: affine layers,
//! ReLU, the losses used by the pipeline, Adam and a cosine schedule.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod schedule;

pub use adam::{adam_step, AdamState};
pub use dense::{dense_forward, relu, relu_backward, DenseGrads, DenseParams};
pub use gradcheck::{grad_check, GradCheck};
pub use loss::{accuracy, argmax_rows, ce_loss, elastic_penalty, kd_loss, log_softmax_rows, mse_loss, softmax_rows};
pub use schedule::{cosine_lr, LrSchedule, ScheduleKind};
