//! Sparse attention driven by learned bit signatures.
//!
//! Keys and queries are mapped to short binary codes by small feed-forward
//! networks; the tokens whose codes are closest to the query's code in
//! Hamming distance are treated as pivotal and attention is computed over
//! them only. Exact attention, the isolated-token oracle and a random-
//! projection baseline live alongside so every approximate scorer can be
//! checked against ground truth.
//!
//! All numeric code is generic over [`numerics::Scalar`] (`f32` or `f64`).
//! The aliases at the crate root fix the scalar to `f64`, which every
//! training and verification path uses.

pub mod attention;
pub mod error;
pub mod harness;
pub mod mips;
pub mod numerics;
pub mod signatures;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Rng, Scalar};
pub use signatures::{Signature, SignatureCache};

pub type Matrix = numerics::Matrix<f64>;
pub type Vector = numerics::Vector<f64>;
pub type AttentionInstance = attention::AttentionInstance<f64>;
pub type MappingNetwork = signatures::MappingNetwork<f64>;
pub type LshProjector = mips::LshProjector<f64>;

pub type Matrix32 = numerics::Matrix<f32>;
pub type MappingNetwork32 = signatures::MappingNetwork<f32>;
pub type HashModel = training::HashModel<f64>;
