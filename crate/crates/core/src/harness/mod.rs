//! Drivers behind the CLI: dataset loading, the training loop, evaluation
//! with optional re-ranking, and the finite-difference gradient check.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod train;

use crate::attention::{ProjectionParams, Scorer};
use crate::config::RunConfig;
use crate::error::Result;

pub use data::{load_split, CaptionItem, ImageItem, LoadedSplit};
pub use eval::{evaluate, export_attention_for, rank, EvalOutcome, RankOutcome};
pub use gradcheck::{gradcheck, render_gradcheck_report, GradcheckDims, GradcheckReport};
pub use train::{train, TrainOutcome};

/// Seed salts keeping independent random streams apart.
pub(crate) const CLASSIFIER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
pub(crate) const SAMPLER_SEED_SALT: u64 = 0x517c_c1b7_2722_0a95;
pub(crate) const SHUFFLE_SEED_SALT: u64 = 0xd1b5_4a32_d192_ed03;

pub fn scorer_from(cfg: &RunConfig, params: ProjectionParams) -> Result<Scorer> {
    Ok(Scorer::new(params, cfg.temperatures()?, cfg.norm_axis))
}
