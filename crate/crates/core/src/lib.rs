//! Concept-guided mixture-of-experts routing for multiple-choice scoring.
//!
//! A teacher router shifts expert logits toward the semantic direction of
//! the correct answer's cues; a cue-free student router is distilled from it
//! and used at inference. All options of a sample share one Top-K expert
//! set and are reweighted within it by their own semantic direction.
//!
//! Modules follow the data path: [`numerics`] and [`cues`] supply the
//! primitives, [`moe`] routes, [`options`] scores, [`losses`] and
//! [`trainer`] fit the model, and [`diagnostics`] measures routing quality.

// Range checks are written as `!(x >= 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cues;
pub mod diagnostics;
mod error;
pub mod losses;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod options;
pub mod trainer;

pub use error::{Error, Result};
