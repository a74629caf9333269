//! Early estimation of a model's converged accuracy from its feature history.
//!
//! During training, the penultimate-layer features of the train and validation
//! sets are saved each epoch together with the linear head. After any epoch the
//! head of each of the last `k` epochs is refit on that epoch's train features,
//! the refit heads are applied to their own epoch's validation features, and the
//! softmax outputs are averaged. The accuracy of that ensemble tracks the final
//! accuracy of the run far earlier than the raw validation accuracy does.
//!
//! Crate layout:
//!
//! - [`numkit`]: dense `f32` matrices, softmax / cross-entropy, SGD, the
//!   linear schedule and a portable PRNG.
//! - [`feature_store`]: the `FHST` binary archive of feature histories.
//! - [`proxy`]: the refit / ensemble estimator and its diagnostics.
//! - [`trainer`]: a resumable two-layer MLP trainer on synthetic data that
//!   records feature histories.
//! - [`search`]: random search, HyperBand and BOHB over a generic space.
//! - [`bench`]: corpus building, Kendall's tau and ranking evaluation.

pub mod bench;
pub mod error;
pub mod feature_store;
pub mod numkit;
pub mod proxy;
pub mod report;
pub mod search;
pub mod trainer;

pub use error::{Error, Result};
