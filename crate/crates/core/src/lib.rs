//! Multi-task hierarchical-attention learning toolkit for conversational
//! analysis.
//!
//! The toolkit trains talkturn-level predictors on multimodal text
//! narratives and re-uses feature-engineering by-products (facial action
//! units, voice prosody, neighbouring labels) as sixteen auxiliary
//! supervision targets. It ships two architectures (a flat multi-task
//! hierarchical attention network and a branched variant that keeps
//! auxiliary supervision below the primary task), mutual-information
//! based loss weighting, random hyperparameter search with median
//! stopping, selection-aware bootstrap model comparison, and attention
//! reports.

pub mod autodiff;
pub mod aux_targets;
pub mod corpus;
pub mod embeddings;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod training;
pub mod weighting;
pub mod checkpoint;
pub mod error;
pub mod evaluation;

pub use error::{Error, Result};
