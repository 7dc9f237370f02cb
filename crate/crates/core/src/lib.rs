//! Interpretable prototype classification of EEG windows.
//!
//! A convolutional backbone maps a 128×37 EEG window onto the unit sphere;
//! the window is scored by cosine similarity against learned prototypes,
//! each of which is eventually replaced by a real training window, and a
//! bias-free linear head turns those similarities into vote-class logits.
//! Every prediction therefore decomposes exactly into per-prototype
//! "points contributed".

pub mod diffcore;
mod error;

pub use error::{Error, Result};
pub mod digest;
pub mod model;
pub mod losses;
pub mod sigproc;
pub mod dataset;
pub mod eval;
pub mod training;
pub mod explain;

#[cfg(test)]
mod test_support;
