//! Hospital-level choice prediction from insurance claims records.
//!
//! The crate covers the whole batch pipeline: loading claims files and
//! applying the record/patient exclusion rules, computing the continuity of
//! care and provider-vote features, sampling (split, undersampling, k-fold),
//! a feed-forward classifier and an autoencoder trained with mini-batch SGD,
//! Shapley-value attributions, and macro-averaged one-vs-rest metrics. A
//! seeded synthetic cohort generator makes the pipeline runnable without the
//! restricted source data.
//!
//! Numerical code is generic over the floating point type through [`Scalar`];
//! the aliases below fix it to `f64`, which is what the pipeline uses.

pub mod domain;
pub mod error;
pub mod explain;
pub mod features;
pub mod ingest;
mod kv;
pub mod metrics;
pub mod neuralnet;
pub mod pipeline;
pub mod run;
pub mod scalar;
pub mod synthgen;

pub use domain::{ExclusionReason, HospitalLevel};
pub use error::{Error, Result};
pub use kv::KeyValues;
pub use scalar::Scalar;

/// Feed-forward classifier over `f64`.
pub type Classifier = neuralnet::Classifier<f64>;
/// Autoencoder over `f64`.
pub type Autoencoder = neuralnet::Autoencoder<f64>;
/// Generic layer stack over `f64`.
pub type Network = neuralnet::Network<f64>;
/// Single-precision classifier, mostly useful for memory-bound inference.
pub type Classifier32 = neuralnet::Classifier<f32>;
/// Single-precision autoencoder.
pub type Autoencoder32 = neuralnet::Autoencoder<f32>;
/// Shapley attribution over `f64` outputs.
pub type Attribution = explain::Attribution<f64>;
/// Global mean-|phi| importance over `f64`.
pub type GlobalImportance = explain::GlobalImportance<f64>;
/// Continuity indices over `f64`.
pub type ContinuityIndices = features::ContinuityIndices<f64>;
/// Per-class metrics over `f64`.
pub type ClassMetrics = metrics::ClassMetrics<f64>;
/// Metric report over `f64`.
pub type MetricReport = metrics::MetricReport<f64>;
