//! Crowd counting by detection plus density estimation.
//!
//! Clearly visible people are detected, counted and masked out of the image;
//! an encoder-decoder network estimates a density map over what remains and
//! the two counts are summed. Everything the network needs (convolutions,
//! reverse-mode differentiation, the optimizer) is implemented here in 64-bit
//! floating point so that every gradient can be checked against finite
//! differences.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod density;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod imageio;
pub mod loss;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DenetError, Result};
