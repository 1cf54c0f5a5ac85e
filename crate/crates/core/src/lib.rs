//! trendsift: mining recurring visual-change trends from massive collections
//! of timestamped, geolocated street imagery.
//!
//! The pipeline has two stages. Stage 1 groups capture points into
//! per-location chronological image sequences and asks a pluggable
//! vision-language analyst to describe the semantic changes in each sequence
//! (with an optional self-critic pass that discards unsupported detections).
//! Stage 2 abstracts the change descriptions, embeds them, clusters the
//! abstractions into trend proposals with canopy clustering, and verifies each
//! proposal with a hybrid scheme: an exact nearest-neighbor shortlist of size
//! `k` over the change pool, oracle-checked one neighbor at a time, positive
//! once `N` members are confirmed.
//!
//! Everything downstream of the analyst is deterministic for a fixed seed, and
//! the analyst itself can be swapped between a remote HTTP backend and a
//! scripted synthetic oracle (`gateway::synthetic`), which is what the test
//! suite and the evaluation harness run against.

pub mod corpus;
pub mod detect;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod geo;
pub mod index;
pub mod pipeline;
pub mod store;
pub mod trends;
pub mod worldgen;

pub use embedding::EmbeddingVector;
pub use gateway::{Backend, Gateway, RawChange};
pub use index::{Canopy, VectorIndex};
pub use trends::{TrendProposal, VerificationResult};
