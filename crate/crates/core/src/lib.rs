//! Calibrated prediction sets for retrieve-then-generate question answering.
//!
//! `ragset` consumes offline score logs (retrieval scores for the top-K
//! passages of each question, plus M sampled generator responses per
//! passage) and builds prediction sets with distribution-free coverage
//! guarantees:
//!
//! - [`conformal`]: split-conformal and PAC thresholds, and the generic
//!   `score <= tau` set constructor.
//! - [`semantic`]: Rouge-1 scoring and greedy clustering of sampled
//!   responses into semantic clusters with frequency confidences.
//! - [`pipeline`]: retriever sets, per-passage generator sets, their
//!   aggregation, the PAC variant and the abstention ("I do not know")
//!   extension.
//! - [`budget`]: Gaussian-process Bayesian optimization of how the total
//!   miscoverage budget is split between the two stages.
//! - [`eval`]: correctness judgments, coverage and set-size reports, and
//!   multi-seed trial runs.
//! - [`data`]: the line-delimited dataset format, seeded splits and a
//!   synthetic generator.
//! - [`cli`]: the batch workflow behind the `ragset` binary.
//!
//! See `crates/core/examples/` for one runnable program per capability.

pub mod budget;
pub mod cli;
pub mod conformal;
pub mod data;
mod error;
pub mod eval;
pub mod pipeline;
pub mod semantic;
mod serde_ext;

pub use error::{Error, Result};
