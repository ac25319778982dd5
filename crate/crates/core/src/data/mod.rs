//! Labelled datasets, label corruption, the binary dataset format and the
//! bundled synthetic image generator.

mod dataset;
pub mod format;
mod synthetic;

pub use dataset::{corrupt_labels, LabeledDataset, Split};
pub use synthetic::SyntheticSpec;
