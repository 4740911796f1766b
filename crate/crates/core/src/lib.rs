//! Voice conversion with an average model trained on phonetic posteriorgrams,
//! optimized jointly with a frame-level reconstruction loss and an
//! utterance-level speaker-embedding cycle consistency loss computed through
//! a frozen speaker embedder. Includes a synthetic corpus generator and the
//! MCD/CCD evaluation harness.

pub mod conversion;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod nn;
pub mod runtime;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
