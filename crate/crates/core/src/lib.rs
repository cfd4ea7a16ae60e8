//! Turns rows of a relational database into self-contained JSON documents
//! for language-model prediction, scores them through a pluggable scorer,
//! and decodes task predictions.
//!
//! Modules, bottom up:
//!
//! - [`relstore`]: typed CSV ingest and key indexes.
//! - [`taskdef`]: task tables, splits and in-context samplers.
//! - [`docforge`]: denormalization, serialization and document assembly.
//! - [`scorer`]: next-token, continuation and embedding scorers (HTTP, mock).
//! - [`inference`]: AUROC and MAE decision rules.
//! - [`mlphead`]: a small MLP head over last-token embeddings.
//! - [`evalharness`]: metrics, parameter grids and run reports.
//! - [`synth`]: a synthetic retail database for demos and tests.

pub mod docforge;
pub mod evalharness;
pub mod inference;
pub mod mlphead;
pub mod relstore;
pub mod scorer;
pub mod synth;
pub mod taskdef;
