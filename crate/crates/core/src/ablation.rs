//! Cumulative unit ablation.
//!
//! Units of one layer are ranked by their mean L1 activation on a class
//! subset and then switched off one after another, once in descending and once
//! in ascending order, recording the class accuracy after every removal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::engine::{Capture, Network, UnitMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean L1 activation of each unit of a layer over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAttribute {
    pub layer: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOrder {
    Descending,
    Ascending,
}

/// Which samples are scored while units are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Accuracy on the class subset: fraction of its samples predicted as the class.
    #[default]
    PerClass,
    /// Accuracy of the whole dataset against its labels; ranking still uses the class subset.
    WholeDataset,
}

/// Accuracy after removing `n = 0..=M` units, for both orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub class: usize,
    pub layer: usize,
    pub units: usize,
    /// Number of samples in the class subset.
    pub samples: usize,
    pub mode: EvalMode,
    /// Unmasked accuracy, equal to the first entry of both curves.
    pub baseline: f64,
    /// Accuracy with the `n` most active units removed.
    pub descending: Vec<f64>,
    /// Accuracy with the `n` least active units removed.
    pub ascending: Vec<f64>,
}

fn attributes_from_activations(layer: usize, activations: &Tensor, units: usize) -> Result<UnitAttribute> {
    if activations.batch() == 0 {
        return Err(Error::domain("no samples to attribute"));
    }
    let per_unit = activations.item_len() / units;
    let mut sums = vec![0.0f64; units];
    for b in 0..activations.batch() {
        for (u, chunk) in activations.item(b).chunks(per_unit).enumerate() {
            sums[u] += chunk.iter().map(|&v| (v as f64).abs()).sum::<f64>();
        }
    }
    let n = activations.batch() as f64;
    Ok(UnitAttribute {
        layer,
        values: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// `h(U_i)`: the spatial L1 sum of unit `i`'s post-activation map, averaged
/// over the samples in `class_batch`. Dense units contribute `|a_i|`.
pub fn unit_attributes(net: &Network, class_batch: &Tensor, layer: usize) -> Result<UnitAttribute> {
    if class_batch.rank() == 0 || class_batch.batch() == 0 {
        return Err(Error::domain("empty class subset"));
    }
    let capture = net.forward_capture(class_batch, layer)?;
    attributes_from_activations(layer, capture.activations(), net.unit_count(layer)?)
}

/// Stable ranking by attribute value; equal values keep lower unit indices first.
pub fn rank_units(attr: &UnitAttribute, order: RankOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attr.values.len()).collect();
    match order {
        RankOrder::Descending => idx.sort_by(|&a, &b| attr.values[b].total_cmp(&attr.values[a])),
        RankOrder::Ascending => idx.sort_by(|&a, &b| attr.values[a].total_cmp(&attr.values[b])),
    }
    idx
}

fn check_ranking(ranking: &[usize], units: usize) -> Result<()> {
    let mut seen = vec![false; units];
    if ranking.len() != units {
        return Err(Error::domain(format!("ranking has {} entries for {units} units", ranking.len())));
    }
    for &u in ranking {
        if u >= units || std::mem::replace(&mut seen[u], true) {
            return Err(Error::domain(format!("ranking is not a permutation of 0..{units}")));
        }
    }
    Ok(())
}

fn accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    let hits = logits.argmax_rows().iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / targets.len() as f64
}

/// Accuracy sequence of length `M + 1` from cached activations: entry `n` has
/// the first `n` units of `ranking` masked.
pub fn cumulative_ablation_cached(net: &Network, capture: &Capture, targets: &[usize], ranking: &[usize]) -> Result<Vec<f64>> {
    let units = net.unit_count(capture.layer())?;
    check_ranking(ranking, units)?;
    if targets.len() != capture.activations().batch() {
        return Err(Error::config("one target per captured sample required"));
    }
    let mut mask = UnitMask::empty(capture.layer());
    let mut curve = Vec::with_capacity(units + 1);
    curve.push(accuracy(&net.resume(capture, Some(&mask))?, targets));
    for &u in ranking {
        mask.disabled.insert(u);
        curve.push(accuracy(&net.resume(capture, Some(&mask))?, targets));
    }
    Ok(curve)
}

/// Cumulative ablation of `layer` on the samples of one class, scored as the
/// fraction predicted as `class`.
pub fn cumulative_ablation(net: &Network, class_batch: &Tensor, class: usize, layer: usize, ranking: &[usize]) -> Result<Vec<f64>> {
    if class_batch.batch() == 0 {
        return Err(Error::domain("empty class subset"));
    }
    let capture = net.forward_capture(class_batch, layer)?;
    cumulative_ablation_cached(net, &capture, &vec![class; class_batch.batch()], ranking)
}

/// Both ablation curves of one class from a single capture.
pub fn sweep_class(net: &Network, data: &LabeledDataset, class: usize, layer: usize, mode: EvalMode) -> Result<AblationCurve> {
    let members = data.class_indices(class);
    if members.is_empty() {
        return Err(Error::domain(format!("class {class} has no samples")));
    }
    let units = net.unit_count(layer)?;
    let class_batch = data.batch(&members)?;
    let class_capture = net.forward_capture(&class_batch, layer)?;
    let attr = attributes_from_activations(layer, class_capture.activations(), units)?;
    let (capture, targets) = match mode {
        EvalMode::PerClass => (class_capture, vec![class; members.len()]),
        EvalMode::WholeDataset => (net.forward_capture(&data.all(), layer)?, data.labels().to_vec()),
    };
    let descending = cumulative_ablation_cached(net, &capture, &targets, &rank_units(&attr, RankOrder::Descending))?;
    let ascending = cumulative_ablation_cached(net, &capture, &targets, &rank_units(&attr, RankOrder::Ascending))?;
    Ok(AblationCurve {
        class,
        layer,
        units,
        samples: members.len(),
        mode,
        baseline: descending[0],
        descending,
        ascending,
    })
}

/// Sweeps every class (in parallel); results are ordered by class.
pub fn sweep_all(net: &Network, data: &LabeledDataset, layer: usize, mode: EvalMode) -> Result<Vec<AblationCurve>> {
    (0..data.num_classes())
        .into_par_iter()
        .map(|class| sweep_class(net, data, class, layer, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(values: &[f64]) -> UnitAttribute {
        UnitAttribute {
            layer: 0,
            values: values.to_vec(),
        }
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_units(&attr(&[3.0, 1.0, 2.0]), RankOrder::Descending), vec![0, 2, 1]);
        assert_eq!(rank_units(&attr(&[1.0, 1.0, 1.0]), RankOrder::Descending), vec![0, 1, 2]);
        assert_eq!(rank_units(&attr(&[3.0, 1.0, 2.0]), RankOrder::Ascending), vec![1, 2, 0]);
        assert_eq!(rank_units(&attr(&[1.0, 1.0, 1.0]), RankOrder::Ascending), vec![0, 1, 2]);
    }

    #[test]
    fn attribute_is_mean_spatial_l1() {
        // one unit, 2x2 map [[1,2],[3,4]]
        let one = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(attributes_from_activations(0, &one, 1).unwrap().values, vec![10.0]);
        // per-sample sums 5 and 7
        let two = Tensor::new(vec![2, 1, 1, 2], vec![2.0, 3.0, 3.0, 4.0]).unwrap();
        assert_eq!(attributes_from_activations(0, &two, 1).unwrap().values, vec![6.0]);
        let dead = Tensor::new(vec![2, 2, 1, 1], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        assert_eq!(attributes_from_activations(0, &dead, 2).unwrap().values, vec![0.0, 2.0]);
    }

    #[test]
    fn ranking_must_be_permutation() {
        assert!(check_ranking(&[0, 1, 2], 3).is_ok());
        assert!(check_ranking(&[0, 0, 2], 3).is_err());
        assert!(check_ranking(&[0, 1], 3).is_err());
        assert!(check_ranking(&[0, 1, 3], 3).is_err());
    }
}
