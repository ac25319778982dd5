//! Margin-distribution baseline.
//!
//! The distance of a sample to the decision boundary between its class `i`
//! and the runner-up class `j` is linearised at the sample:
//! `d = (f_i - f_j) / ||grad_x f_i - grad_x f_j||`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::estimator::LinearModel;
use crate::tensor::Tensor;

/// Gradient norms below this leave the margin undefined.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

/// Quantile features fed to the regression. The interquartile range is
/// reported but left out of the design, being `q75 - q25`.
pub const REGRESSION_FEATURES: [&str; 3] = ["q25", "median", "q75"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginFeatures {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub iqr: f64,
}

impl MarginFeatures {
    pub fn regression_row(&self) -> Vec<f64> {
        vec![self.q25, self.median, self.q75]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginDistribution {
    pub network_id: String,
    /// Signed distances of the samples with a defined margin, in sample order.
    pub distances: Vec<f64>,
    /// Samples whose gradient difference vanished.
    pub undefined: usize,
    pub features: MarginFeatures,
}

/// Highest-scoring class other than `class`; ties go to the lowest index.
fn runner_up(logits: &[f32], class: usize) -> usize {
    let mut best = None;
    for (k, &v) in logits.iter().enumerate() {
        if k != class && best.map_or(true, |b: usize| v > logits[b]) {
            best = Some(k);
        }
    }
    best.expect("at least two classes")
}

/// Signed margins of a batch against `classes`; `None` marks an undefined margin.
pub fn margin_distances_batch(net: &Network, batch: &Tensor, classes: &[usize]) -> Result<Vec<Option<f64>>> {
    let n = net.num_classes();
    if classes.len() != batch.batch() {
        return Err(Error::config("one class per sample required"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= n) {
        return Err(Error::domain(format!("class {c} outside [0, {n})")));
    }
    let logits = net.forward(batch, None)?;
    let mut cotangent = Tensor::zeros(logits.shape().to_vec());
    let mut gaps = Vec::with_capacity(classes.len());
    for (b, &i) in classes.iter().enumerate() {
        let row = logits.item(b);
        let j = runner_up(row, i);
        gaps.push(row[i] as f64 - row[j] as f64);
        let slot = &mut cotangent.data_mut()[b * n..(b + 1) * n];
        slot[i] = 1.0;
        slot[j] = -1.0;
    }
    let grads = net.vjp(batch, &cotangent)?;
    Ok(gaps
        .into_iter()
        .enumerate()
        .map(|(b, gap)| {
            let norm = grads.input.item(b).iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            (norm >= MIN_GRADIENT_NORM).then(|| gap / norm)
        })
        .collect())
}

/// Margin of one sample (given without batch dimension) for its true class.
pub fn margin_distance(net: &Network, sample: &[f32], class: usize) -> Result<Option<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let batch = Tensor::new(shape, sample.to_vec())?;
    Ok(margin_distances_batch(net, &batch, &[class])?[0])
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn margin_features(distances: &[f64]) -> Result<MarginFeatures> {
    if distances.len() < 4 {
        return Err(Error::domain(format!("need at least 4 defined margins, got {}", distances.len())));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q25, median, q75) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    Ok(MarginFeatures {
        q25,
        median,
        q75,
        iqr: q75 - q25,
    })
}

/// Margin distribution of a network over a dataset, against its labels in force.
pub fn margin_distribution(net: &Network, data: &LabeledDataset) -> Result<MarginDistribution> {
    const CHUNK: usize = 128;
    let mut distances = Vec::with_capacity(data.len());
    let mut undefined = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let classes: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
        for d in margin_distances_batch(net, &data.batch(chunk)?, &classes)? {
            match d {
                Some(d) => distances.push(d),
                None => undefined += 1,
            }
        }
    }
    let features = margin_features(&distances)?;
    Ok(MarginDistribution {
        network_id: net.meta.id.clone(),
        distances,
        undefined,
        features,
    })
}

/// Least-squares gap model over the margin quantile features.
pub fn fit_margin_model(features: &[MarginFeatures], gaps: &[f64]) -> Result<LinearModel> {
    if features.len() != gaps.len() {
        return Err(Error::domain("one gap per feature vector required"));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(MarginFeatures::regression_row).collect();
    LinearModel::fit(&rows, gaps, &REGRESSION_FEATURES)
}
