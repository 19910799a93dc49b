//! Divide-and-conquer inference over large candidate label spaces.
//!
//! A flat prompt listing thousands of candidate labels dilutes the model's
//! attention across all of them. This crate instead splits the label space
//! into small groups, asks a vision-language backend about each group, prunes
//! groups that answer `None`, and recurses on the survivors.
//!
//! - [`label_space`]: label sets and partitioning strategies
//! - [`prompting`]: prompt rendering and answer parsing
//! - [`backends`]: the backend contract, an HTTP client and a simulated oracle
//! - [`engine`]: the recursive classifier and the flat baseline
//! - [`analysis`]: cost model, call-count bounds and information bounds
//! - [`harness`]: dataset loading, experiment sweeps and reports

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod backends;
pub mod engine;
pub mod harness;
pub mod label_space;
pub mod prompting;

pub use backends::{Backend, BackendError, BackendResult, DilutionOracleParams, ImageRef, OracleBackend, Query};
pub use engine::{dci_classify, flat_classify, EngineConfig, EngineError, FinalPrediction, Grouping, RunTrace};
pub use label_space::{GroupSize, LabelSet, Partition, SimilarityMatrix};
pub use prompting::{InferenceOutcome, ParseMode, ParsePolicy, PromptTemplate};
