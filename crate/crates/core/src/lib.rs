//! Face and body detection for drawings.
//!
//! The crate covers the full three-stage training pipeline for a tiny
//! anchor-free detector with two single-class heads:
//!
//! 1. supervised pre-training on natural images pushed through a bank of
//!    cartoonization styles ([`pipeline::run_stage1`]),
//! 2. teacher-student self-training on unlabeled drawings with an EMA
//!    teacher, a gated hard-example confidence loss and periodic student
//!    resets ([`selfsup::run_stage2`]),
//! 3. fine-tuning on a small labeled drawing subset ([`pipeline::run_stage3`]).
//!
//! Everything is deterministic given a seed, single-threaded and written in
//! plain `f64` so every update rule can be checked against scalar oracles.

pub mod datapipe;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod selfsup;

pub use error::{Error, Result};
pub use geometry::{BBox, Klass, ScoredBox};
