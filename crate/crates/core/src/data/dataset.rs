use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples of an N-class problem. `labels` are the labels in force (possibly
/// corrupted); `original_labels` are kept for bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    original_labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        let original = labels.clone();
        Self::with_original(num_classes, sample_shape, features, labels, original, split)
    }

    pub fn with_original(
        num_classes: usize,
        sample_shape: Vec<usize>,
        features: Vec<f32>,
        labels: Vec<usize>,
        original_labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("a dataset needs at least 2 classes"));
        }
        let item: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || item == 0 {
            return Err(Error::config(format!("invalid sample shape {sample_shape:?}")));
        }
        if labels.is_empty() || features.len() != labels.len() * item || original_labels.len() != labels.len() {
            return Err(Error::config(format!(
                "{} feature values and {}/{} labels do not describe samples of shape {sample_shape:?}",
                features.len(),
                labels.len(),
                original_labels.len()
            )));
        }
        if let Some(&l) = labels.iter().chain(&original_labels).find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Self {
            num_classes,
            sample_shape,
            features,
            labels,
            original_labels,
            split,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn original_labels(&self) -> &[usize] {
        &self.original_labels
    }

    fn item_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.features[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::bounds(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data)
    }

    pub fn all(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::from_parts(shape, self.features.clone())
    }

    /// Indices of samples currently labelled `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Number of samples whose label differs from the original.
    pub fn changed_labels(&self) -> usize {
        self.labels.iter().zip(&self.original_labels).filter(|(a, b)| a != b).count()
    }
}

/// Re-draws the labels of `round(fraction * |D_k|)` samples in every class
/// `k`, uniformly over all classes (a redrawn label may equal the old one).
pub fn corrupt_labels(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::domain(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let sizes = dataset.class_sizes();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::domain(format!("class {k} has no samples")));
    }
    let mut out = dataset.clone();
    for class in 0..dataset.num_classes {
        let mut members = dataset.class_indices(class);
        let count = (fraction * members.len() as f64).round() as usize;
        let mut rng = rng::stream(seed, "corrupt", class as u64);
        members.shuffle(&mut rng);
        for &i in &members[..count] {
            out.labels[i] = rng.gen_range(0..dataset.num_classes);
        }
    }
    Ok(out)
}
