//! Synthetic-data harness around `mrfdet-core`: dataset generation, training,
//! checkpoints, evaluation, ablations and gradient checks.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod image;
pub mod infer;
pub mod train;
