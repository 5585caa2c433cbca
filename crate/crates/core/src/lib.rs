//! Uncertainty-aware, decoder-aligned video summarization.
//!
//! A hierarchical segment-context scorer feeds a variational importance head;
//! training combines multi-annotator likelihoods with ranking, KL and
//! knapsack-stability regularizers, and inference decodes budgeted keyshot
//! summaries with an exact 0/1 knapsack.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod scorer;
pub mod timeline;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Dataset, DatasetMode, SyntheticConfig, VideoRecord};
pub use error::{Error, Result};
pub use model::ModelConfig;
