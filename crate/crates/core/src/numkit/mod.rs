//! Dense numerics shared by the trainer and the estimator.
//!
//! Storage is `f32`; reductions (dot products, loss sums) accumulate in `f64`.

mod matrix;
mod ops;
mod optim;
mod rng;

pub use matrix::Matrix;
pub(crate) use matrix::{dot, dot64};
pub use ops::{accuracy, argmax, cross_entropy, softmax, softmax_row_in_place};
pub use optim::{linear_lr, sgd_step, sgd_update, SgdConfig};
pub use rng::Rng;
