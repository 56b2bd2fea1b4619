//! Forward-only extraction pipeline for medicine names on printed labels.
//!
//! The stages compose left to right: a convolutional detector proposes
//! text regions, a small transformer reads each crop into characters, and
//! a two-stage string matcher snaps noisy readings onto a lexicon of known
//! names. Everything runs on the CPU from explicit weight files; there is
//! no training code.

pub mod detector;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod recognizer;
pub mod tensor;

pub use error::{Error, Result};
