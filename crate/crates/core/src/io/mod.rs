//! File formats and datasets.

pub mod dataset;
pub mod image;
pub mod ply;
pub mod synthetic;

pub use dataset::{load_dataset, save_dataset, Dataset, View};
pub use synthetic::{generate_synthetic, SyntheticScene, SyntheticSpec};

use crate::config::RunConfig;
use crate::error::Result;

/// The dataset a run config points at: a directory when `data.path` is set,
/// the synthetic generator otherwise.
pub fn load_run_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(p, cfg.data.downscale as usize),
        None => Ok(generate_synthetic(&cfg.data.synthetic, cfg.seed)?.dataset),
    }
}
