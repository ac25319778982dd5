use ablg_core::data::{corrupt_labels, LabeledDataset, Split, SyntheticSpec};
use ablg_core::trainer::{self, build_zoo, initial_network, train, Strategy, TrainConfig, ZooEntry, ZooGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data(classes: usize, train_per_class: usize, test_per_class: usize) -> (LabeledDataset, LabeledDataset) {
    SyntheticSpec {
        num_classes: classes,
        side: 8,
        train_per_class,
        test_per_class,
        seed: 3,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap()
}

fn mlp_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        template: "mlp".into(),
        epochs,
        learning_rate: 0.02,
        momentum: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn full_corruption_is_uniform_over_classes() {
    let n = 10;
    let features = vec![0.0f32; 1000];
    let labels: Vec<usize> = (0..1000).map(|i| i % n).collect();
    let ds = LabeledDataset::new(n, vec![1], features, labels, Split::Train).unwrap();
    let corrupted = corrupt_labels(&ds, 1.0, 17).unwrap();
    let mut counts = vec![0usize; n];
    for &l in corrupted.labels() {
        counts[l] += 1;
    }
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - 100.0).powi(2) / 100.0).sum();
    // chi-square critical value, 9 degrees of freedom, alpha = 0.01
    assert!(chi2 < 21.666, "chi2 = {chi2}, counts {counts:?}");
    assert_eq!(corrupted.original_labels(), ds.labels());
}

#[test]
fn corruption_is_contained_and_deterministic() {
    let (train_set, _) = small_data(5, 13, 1);
    for fraction in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let a = corrupt_labels(&train_set, fraction, 4).unwrap();
        assert_eq!(a.features(), train_set.features());
        assert_eq!(a.labels(), corrupt_labels(&train_set, fraction, 4).unwrap().labels());
        for class in 0..5 {
            let members = train_set.class_indices(class);
            let changed = members.iter().filter(|&&i| a.labels()[i] != train_set.labels()[i]).count();
            assert!(changed <= (fraction * members.len() as f64).round() as usize);
        }
        if fraction == 0.0 {
            assert_eq!(a.labels(), train_set.labels());
        }
    }
    assert!(corrupt_labels(&train_set, 1.5, 0).is_err());
    assert!(corrupt_labels(&train_set, -0.1, 0).is_err());
}

#[test]
fn separable_toy_is_solved_by_one_dense_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut features, mut labels) = (Vec::new(), Vec::new());
    for i in 0..64 {
        let class = i % 2;
        let sign = if class == 0 { 1.0 } else { -1.0 };
        features.push(sign * rng.gen_range(0.2f32..1.0));
        features.extend((0..3).map(|_| rng.gen_range(-1.0f32..1.0)));
        labels.push(class);
    }
    let ds = LabeledDataset::new(2, vec![4], features, labels, Split::Train).unwrap();
    let config = TrainConfig {
        template: "linear".into(),
        epochs: 50,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    let t = train(&ds, &ds, &config).unwrap();
    assert_eq!(t.entry.train_accuracy, 1.0);
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let (train_set, test_set) = small_data(3, 6, 2);
    let config = mlp_config(0);
    let t = train(&train_set, &test_set, &config).unwrap();
    let init = initial_network(&config, &t.train_set, &t.entry.id).unwrap();
    assert_eq!(t.network, init);
    assert!(t.entry.epoch_losses.is_empty());
}

#[test]
fn training_is_deterministic_and_gap_is_consistent() {
    let (train_set, test_set) = small_data(4, 12, 10);
    let config = TrainConfig {
        template: "toy-cnn".into(),
        dropout: 0.3,
        corruption: 0.5,
        epochs: 3,
        ..mlp_config(3)
    };
    let a = train(&train_set, &test_set, &config).unwrap();
    let b = train(&train_set, &test_set, &config).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!(a.entry, b.entry);
    let e = &a.entry;
    let recomputed =
        ZooEntry::accuracy_of(&e.train_predictions, a.train_set.labels()) - ZooEntry::accuracy_of(&e.test_predictions, test_set.labels());
    assert!((recomputed - e.gap).abs() <= 1e-9);
    assert!((-1.0..=1.0).contains(&e.gap));
}

#[test]
fn baseline_loss_does_not_increase() {
    let (train_set, test_set) = small_data(4, 16, 4);
    let t = train(&train_set, &test_set, &mlp_config(25)).unwrap();
    let losses = &t.entry.epoch_losses;
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn random_labels_are_memorised_without_generalising() {
    let (train_set, test_set) = small_data(10, 20, 60);
    let config = TrainConfig {
        corruption: 1.0,
        learning_rate: 0.05,
        momentum: 0.9,
        ..mlp_config(80)
    };
    let t = train(&train_set, &test_set, &config).unwrap();
    assert!(t.entry.train_accuracy >= 0.9, "train {}", t.entry.train_accuracy);
    assert!((t.entry.test_accuracy - 0.1).abs() <= 0.05, "test {}", t.entry.test_accuracy);
}

#[test]
fn invalid_configs_are_rejected() {
    let (train_set, test_set) = small_data(3, 4, 2);
    for bad in [
        TrainConfig {
            batch_size: 48,
            ..mlp_config(1)
        },
        TrainConfig {
            momentum: 0.7,
            ..mlp_config(1)
        },
        TrainConfig {
            dropout: 0.1,
            ..mlp_config(1)
        },
        TrainConfig {
            corruption: 0.3,
            ..mlp_config(1)
        },
        TrainConfig {
            template: "vgg".into(),
            ..mlp_config(1)
        },
    ] {
        let err = train(&train_set, &test_set, &bad).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}

#[test]
fn zoo_grid_expands_and_repeats_deterministically() {
    let (train_set, test_set) = small_data(3, 6, 4);
    let single = ZooGrid::single(mlp_config(2));
    let (m, members) = build_zoo(&train_set, &test_set, &single, None, None).unwrap();
    assert_eq!((m.entries.len(), members.len()), (1, 1));

    let grid = ZooGrid {
        base: mlp_config(2),
        corruption: vec![0.0, 1.0],
        strategies: vec![
            Strategy {
                momentum: 0.0,
                weight_decay: 0.0,
                dropout: 0.0,
                batch_size: 32,
            },
            Strategy {
                momentum: 0.9,
                weight_decay: 1e-4,
                dropout: 0.5,
                batch_size: 64,
            },
        ],
        seeds: vec![1],
    };
    assert_eq!(grid.expand().unwrap().len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = build_zoo(&train_set, &test_set, &grid, Some(6), Some(dir.path())).unwrap();
    let (b, _) = build_zoo(&train_set, &test_set, &grid, Some(6), None).unwrap();
    assert_eq!(a.entries.len(), 6);
    for (x, y) in a.entries.iter().zip(&b.entries) {
        assert_eq!(
            (x.train_accuracy, x.test_accuracy, &x.epoch_losses),
            (y.train_accuracy, y.test_accuracy, &y.epoch_losses)
        );
    }
    assert_eq!(a.entries[4].config.seed, 2);
    let loaded = trainer::ZooManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.entries, a.entries);
    for e in &a.entries {
        assert!(dir.path().join(e.weights_path.as_ref().unwrap()).is_file());
    }
}
