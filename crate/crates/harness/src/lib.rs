//! Training, evaluation, ablation, routing analysis, gradient verification
//! and plotting for the mixture-of-experts referring-segmentation model.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod plot;
pub mod tables;
pub mod train;

pub use config::{OptimConfig, RunConfig};
pub use error::{HarnessError, Result};
pub use eval::{evaluate, with_top_k, EvalReport};
pub use train::{train, EpochRecord, RunReport, TrainOutcome};
