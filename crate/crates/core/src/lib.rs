//! Speculative decoding with layer-parallel fuzzy drafting on a toy
//! decoder-only transformer.
//!
//! The drafter runs groups of consecutive attention layers from one shared
//! hidden state, trading a small approximation error for layer-level
//! concurrency. Verification is lossless, so the base model's output
//! distribution is unchanged. A calibration pass after each verification
//! rewrites the drafter's cache with precise keys and values. Timing on
//! multi-device hardware is modeled by [`cost`].

pub mod corpus;
pub mod cost;
pub mod draft;
pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod model;
pub mod plan;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod verify;

pub use cost::{CostParams, SimClock, Stage};
pub use draft::{DraftTree, SimilarityStats};
pub use engine::{Algorithm, ChildSelection, Engine, IterationTrace, RunConfig};
pub use error::{Error, Result};
pub use kv_cache::{KvCache, TreeMask};
pub use model::{ModelConfig, WeightStore};
pub use plan::LayerPlan;
pub use report::RunReport;
pub use rng::{SeededRng, UniformSource};
pub use tensor::{Matrix, ProbVector};
pub use verify::VerificationOutcome;
