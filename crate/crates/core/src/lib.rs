//! Generalization-gap estimation from cumulative unit ablation.
//!
//! The crate trains small networks ([`trainer`]), ablates the units of one
//! layer in ranked order ([`ablation`]), turns the resulting accuracy curves
//! into two sparsity quantities ([`sparsity`]) and regresses the
//! generalization gap on them ([`estimator`]). A margin-distribution baseline
//! ([`margin`]) and an end-to-end experiment driver ([`harness`]) complete it.

pub mod ablation;
pub mod data;
pub mod engine;
mod error;
pub mod estimator;
pub mod harness;
pub mod margin;
pub mod rng;
pub mod sparsity;
mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const TOOL_VERSION: &str = concat!("ablg ", env!("CARGO_PKG_VERSION"));

/// First 16 hex digits of the SHA-256 of a value's JSON encoding.
pub fn digest_json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("serialisable value");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}
