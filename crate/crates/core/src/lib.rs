//! Cross-modal alignment and retrieval engine.
//!
//! The crate turns per-branch visual feature maps and per-scale textual
//! embeddings into scale-tagged feature sets, aligns them with a contextual
//! non-local attention mechanism, trains the alignment with a composite
//! objective whose gradients are verified against finite differences, and
//! evaluates text-to-image retrieval with optional re-ranking by visual
//! neighbors.
//!
//! Module map:
//! - [`feature`]: feature maps, stripe partitioning, split&shuffle, pooling,
//!   scale-tagged feature sets.
//! - [`locality`]: comma-delimited sub-sentence spans and locality-masked
//!   attention over token embeddings.
//! - [`attention`]: projections, clamped cosine similarity, focal filtering
//!   and bidirectional pair scoring.
//! - [`objective`]: alignment losses, reverse-mode gradients and Adam.
//! - [`retrieval`]: gallery ranking, Top-K evaluation and re-ranking by
//!   visual neighbors.
//! - [`synth`], [`config`], [`harness`]: synthetic data generation and the
//!   train / evaluate / gradcheck drivers behind the CLI.
//! - [`io`]: binary and text file formats.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::field_reassign_with_default)]

pub mod attention;
pub mod config;
pub mod error;
pub mod feature;
pub mod harness;
pub mod io;
pub mod locality;
pub mod mat;
pub mod objective;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
