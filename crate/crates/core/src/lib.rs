//! Licence-plate recognition: a small convolutional recognizer trained with
//! CTC, plus the decoding, data and tooling around it.

pub mod cli;
pub mod ctc;
pub mod error;
pub mod flops;
pub mod io;
pub mod layers;
pub mod model;
pub mod postfilter;
pub mod stn;
pub mod synth;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
