//! Minimal layer engine: inference, cached partial inference for ablation
//! sweeps, and backpropagation.

mod layer;
mod network;
pub mod weights;

pub use layer::LayerSpec;
pub use network::{Capture, Gradients, Layer, Network, NetworkMeta, UnitMask};
