//! Learned bit signatures: the mapping network, packed codes, the signature
//! cache that shadows the KV cache, and Hamming scoring.

mod bits;
mod cache;
mod network;

pub use bits::{hamming, pack_bits, unpack_bits, words_for, Signature};
pub use cache::{build_cache, select_pivotal, SignatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use network::{sign_bits, Dense, MappingNetwork};
