//! Text-guided surgical point tracking laboratory.
//!
//! A desk-scale implementation of text-guided point tracking for surgical
//! video: a multimodal annotation schema, a dense f64 tensor engine with
//! reverse-mode differentiation, a deterministic synthetic-scenario
//! generator, a trainable tracker with text-guided coordinate refinement,
//! and a TAP-Vid-style evaluation metric suite.

pub mod anno;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod tgtrack;
pub mod vision;
