//! Differentially private synthetic tabular data from a causal transformer
//! that reads each table row as a sentence.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod app;
pub mod checkpoint;
pub mod config;
pub mod dp;
pub mod error;
pub mod eval;
pub mod model;
pub mod sentence;
pub mod synth;
pub mod table;
pub mod trie;

pub use error::{Error, Result};

/// Splits one run seed into independent, reproducible sub-seeds.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
