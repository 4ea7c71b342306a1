//! Pipeline driver for the pansharpening experiments: toy data, the two
//! pretraining stages, unfolding training, fusion, evaluation and ablation.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod runlog;

pub use error::{HarnessError, Result};
