//! Interactive root-cause ranking over tagged time-series metrics.
//!
//! Records are ingested and grouped into feature families by a small query
//! language; every search family becomes a hypothesis `(X, Y, Z)` that is
//! scored by how well X predicts the target Y once the conditioning set Z has
//! been regressed out of both. Scores are ranked, annotated with null-theory
//! p-values, and kept in append-only sessions.

pub mod engine;
pub mod ingest;
pub mod model;
pub mod query;
pub mod ranking;
pub mod scoring;
pub mod seed;
pub mod stats;
pub mod synth;

pub use model::{
    series_key, validate_hypothesis, Diagnostics, FamilyTable, FeatureFamily, Hypothesis, MetricRecord, Method,
    ModelError, PlotData, ScoreReport, TimeIndex,
};
pub use scoring::{score_hypothesis, ScoringConfig, ScoringError};
