//! Position-enhanced attention decoding for text recognition.
//!
//! The crate contains a small differentiable tensor kernel ([`numerics`]),
//! the decoder (hybrid context branch, position enhancement branch and
//! gated fusion) with its ablation variants, a synthetic glyph-image
//! generator, an Adam training loop and probes that dissect what the
//! decoder's attention queries encode.

pub mod error;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

pub mod config;
pub mod datasynth;
pub mod dissect;
pub mod encoder;
pub mod fusion;
pub mod hybrid;
mod layers;
pub mod model;
pub mod position;
pub mod vocab;
