//! Annotation-guided construction of medical image-text instruction corpora.
//!
//! The crate covers the whole offline pipeline: registering source datasets,
//! standardizing their annotations, prompting a vision-language backend,
//! assembling and auditing the resulting corpus, composing per-stage training
//! mixes, and emitting the three-stage training plan. A small HTTP service
//! supports dataset-level quality review.

pub mod artifact;
pub mod canonicalize;
pub mod composer;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod genclient;
pub mod ingest;
pub mod pipeline;
pub mod promptgen;
pub mod review;
pub mod trainplan;
pub mod types;
