//! Length-conditioned region captioning on a synthetic shapes world.
//!
//! The crate covers the whole pipeline: scene generation ([`world`]), the
//! localized-caption dataset ([`dataset`]), a small vision-text transformer
//! with hand-written gradients ([`nn`], [`model`]), training ([`train`]),
//! decoding ([`decode`]), evaluation protocols ([`eval`]) and prompt assembly
//! for a downstream language model ([`prompt`]).

pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod train;
pub mod world;

pub use error::{Error, Result};

/// SplitMix64 mix of a base seed and a stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
