//! Prompt-guided multi-granularity time series segmentation.
//!
//! A single model segments windows of a multivariate series into states
//! drawn from several granularity levels at once. Sparse label and
//! boundary prompts steer the prediction toward one level and correct it
//! locally; training grows a prompt set over several passes per window so
//! the model learns to react to incremental guidance.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod network;
pub mod prompt;
pub mod session;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
