//! Flexible-length 1D image tokenization.
//!
//! Images (or codec latents) are encoded into an ordered sequence of
//! discrete FSQ tokens whose every prefix decodes to a plausible image
//! through a rectified-flow decoder. A class-conditional autoregressive
//! model generates token sequences of any length.

pub mod ar;
pub mod codec;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fsq;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod repa;
pub mod schedule;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Crate version plus the source revision it was built from.
pub const REVISION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("FLEXTOK_GIT_REV"));
