//! Collaborative vulnerability detection.
//!
//! A fine-tuned detection model and a chat LLM assess every code sample
//! independently. When the two verdicts disagree, the LLM is told what the
//! detector found and asked once to recheck. The LLM's final verdict and
//! vulnerability description are fused with the code into enriched records
//! that a validation model is fine-tuned on and queried with at inference.
//!
//! Module map:
//!
//! - [`corpus`]: dataset loading, label polarity, stratified splits
//! - [`backends`]: detector / LLM clients (HTTP) and deterministic mocks
//! - [`dialogue`]: prompt rendering and reply parsing
//! - [`collab`]: the two-phase assessment state machine, store and pipeline
//! - [`synthesis`]: enriched record construction and export
//! - [`eval`]: metrics, model overlap analysis, ablation runs
//! - [`config`]: run configuration and its digest

pub mod backends;
pub mod collab;
pub mod config;
pub mod corpus;
pub mod dialogue;
pub mod digest;
pub mod error;
pub mod eval;
pub mod synthesis;

mod verdict;

pub use error::{BackendError, Error, Result};
pub use verdict::{SampleId, Verdict};
