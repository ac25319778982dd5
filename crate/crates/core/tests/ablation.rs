mod common;

use std::collections::BTreeSet;

use ablg_core::ablation::{cumulative_ablation, cumulative_ablation_cached, rank_units, sweep_class, unit_attributes, EvalMode, RankOrder};
use ablg_core::data::{LabeledDataset, Split};
use ablg_core::engine::{Network, UnitMask};
use ablg_core::Tensor;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MASK_LAYER: usize = 2;

fn toy(seed: u64) -> (Network, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(&mut rng, vec![1, 8, 8], toy_cnn_specs(4), 0.4);
    let batch = random_tensor(&mut rng, vec![24, 1, 8, 8], 1.0);
    (net, batch)
}

#[test]
fn cached_ablation_matches_naive_recompute() {
    for seed in 0..3 {
        let (net, batch) = toy(seed);
        let attr = unit_attributes(&net, &batch, MASK_LAYER).unwrap();
        assert_eq!(attr.values.len(), 16);
        let predicted = net.forward(&batch, None).unwrap().argmax_rows();
        let class = predicted[0];
        for order in [RankOrder::Descending, RankOrder::Ascending] {
            let ranking = rank_units(&attr, order);
            let cached = cumulative_ablation(&net, &batch, class, MASK_LAYER, &ranking).unwrap();
            let naive = naive_curve(&net, &batch, class, MASK_LAYER, &ranking);
            assert_eq!(cached.len(), 17);
            for (c, n) in cached.iter().zip(&naive) {
                assert!(rel_err(*c, *n) <= 1e-6, "seed {seed} {order:?}: {cached:?} vs {naive:?}");
            }
        }
    }
}

#[test]
fn cached_masks_match_engine_forward() {
    let (net, batch) = toy(7);
    let attr = unit_attributes(&net, &batch, MASK_LAYER).unwrap();
    let ranking = rank_units(&attr, RankOrder::Descending);
    let capture = net.forward_capture(&batch, MASK_LAYER).unwrap();
    let mut disabled = BTreeSet::new();
    for &u in &ranking {
        disabled.insert(u);
        let mask = UnitMask::new(MASK_LAYER, disabled.clone());
        let full = net.forward(&batch, Some(&mask)).unwrap();
        let resumed = net.resume(&capture, Some(&mask)).unwrap();
        assert_eq!(full, resumed);
    }
}

#[test]
fn endpoints_agree_across_orderings() {
    for seed in 0..4 {
        let (net, batch) = toy(seed);
        let labels: Vec<usize> = net.forward(&batch, None).unwrap().argmax_rows();
        let data = LabeledDataset::new(4, vec![1, 8, 8], batch.data().to_vec(), labels.clone(), Split::Train).unwrap();
        for class in 0..4 {
            if data.class_indices(class).is_empty() {
                continue;
            }
            let c = sweep_class(&net, &data, class, MASK_LAYER, EvalMode::PerClass).unwrap();
            assert_eq!(c.descending[0], c.ascending[0]);
            assert_eq!(c.descending[16], c.ascending[16]);
            assert_eq!(c.baseline, 1.0);
            assert!(c.descending.iter().chain(&c.ascending).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn constant_output_network_gives_flat_curves() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = random_network(&mut rng, vec![1, 8, 8], toy_cnn_specs(4), 0.1);
    for t in net.params_mut() {
        t.data_mut().fill(0.0);
    }
    net.params_mut().last().unwrap().data_mut()[2] = 1.0;
    let batch = random_tensor(&mut rng, vec![10, 1, 8, 8], 1.0);
    let data = LabeledDataset::new(4, vec![1, 8, 8], batch.data().to_vec(), vec![2; 10], Split::Train).unwrap();
    let c = sweep_class(&net, &data, 2, MASK_LAYER, EvalMode::PerClass).unwrap();
    assert!(c.descending.iter().all(|&v| v == 1.0));
    assert!(c.ascending.iter().all(|&v| v == 1.0));
    let attr = unit_attributes(&net, &batch, MASK_LAYER).unwrap();
    assert!(attr.values.iter().all(|&h| h == 0.0));
}

#[test]
fn invalid_rankings_and_empty_classes_are_rejected() {
    let (net, batch) = toy(1);
    let capture = net.forward_capture(&batch, MASK_LAYER).unwrap();
    let targets = vec![0; batch.batch()];
    let mut dup: Vec<usize> = (0..16).collect();
    dup[3] = 2;
    assert!(cumulative_ablation_cached(&net, &capture, &targets, &dup).is_err());
    assert!(cumulative_ablation_cached(&net, &capture, &targets, &[0, 1]).is_err());
    let empty = Tensor::zeros(vec![0, 1, 8, 8]);
    assert!(unit_attributes(&net, &empty, MASK_LAYER).is_err());
    let data = LabeledDataset::new(4, vec![1, 8, 8], batch.data().to_vec(), vec![0; 24], Split::Train).unwrap();
    assert!(sweep_class(&net, &data, 1, MASK_LAYER, EvalMode::PerClass).is_err());
}

#[test]
fn whole_dataset_mode_scores_all_labels() {
    let (net, batch) = toy(5);
    let labels = net.forward(&batch, None).unwrap().argmax_rows();
    let data = LabeledDataset::new(4, vec![1, 8, 8], batch.data().to_vec(), labels.clone(), Split::Train).unwrap();
    let class = labels[0];
    let c = sweep_class(&net, &data, class, MASK_LAYER, EvalMode::WholeDataset).unwrap();
    assert_eq!(c.baseline, 1.0);
    assert_eq!(c.samples, data.class_indices(class).len());
}
