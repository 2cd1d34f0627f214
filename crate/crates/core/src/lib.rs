//! Data-driven PBPK concentration prediction.
//!
//! * [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff.
//! * [`pbpk`]: descriptor sampling, compartment simulation and datasets.
//! * [`models`]: MLP, LSTM and dynamic graph network predictors.
//! * [`train`]: losses, AdamW, warm-restart cosine schedule, training loop
//!   and checkpoints.
//! * [`metrics`]: denormalized RMSE/MAE/R² evaluation and model comparison.
//! * [`gradcheck`]: finite-difference verification of tape gradients.

pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod pbpk;
pub mod tensor;
pub mod train;

/// Version stamped into every file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
