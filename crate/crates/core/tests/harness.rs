use std::path::Path;
use std::time::Instant;

use ablg_core::data::SyntheticSpec;
use ablg_core::harness::{read_curve_dir, read_json, run_experiment, DataSource, ExperimentConfig, LayerSelector, Stamped};
use ablg_core::sparsity::SparsityQuantities;
use ablg_core::trainer::{TrainConfig, ZooGrid, ZooManifest};

fn minimal_config(out: &Path) -> ExperimentConfig {
    let data = SyntheticSpec {
        num_classes: 2,
        side: 8,
        train_per_class: 12,
        test_per_class: 12,
        ..Default::default()
    };
    let mut grid = ZooGrid::single(TrainConfig {
        template: "toy-cnn".into(),
        epochs: 4,
        batch_size: 32,
        learning_rate: 0.05,
        ..Default::default()
    });
    grid.corruption = vec![0.0, 0.5];
    serde_json::from_value(serde_json::json!({
        "seed": 11,
        "data": DataSource::Synthetic(data),
        "zoo": grid,
        "output_dir": out,
    }))
    .unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn minimal_experiment_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let config = minimal_config(dir.path());
    let start = Instant::now();
    let report = run_experiment(&config).unwrap();
    assert!(start.elapsed().as_secs() < 60);

    assert_eq!(report.summary.networks, 2);
    assert_eq!(report.quantities.len(), 2);
    assert_eq!(report.curves[0].len(), 2);
    assert!(report.model.is_none() && report.protocol.is_none() && report.margins.is_none());
    assert_eq!(report.summary.skipped.len(), 3);
    for q in &report.quantities {
        assert!((0.0..=1.0).contains(&q.fused.zeta));
    }
    for name in ["data/train.ds", "data/test.ds", "zoo/manifest.json", "scatter.csv", "report.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(!dir.path().join("failures.json").exists());
    for id in report.manifest.entries.iter().map(|e| &e.id) {
        assert!(dir.path().join(format!("margins/{id}.json")).is_file());
        assert!(dir.path().join(format!("zoo/{id}.ablg")).is_file());
    }
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&minimal_config(a.path())).unwrap();
    run_experiment(&minimal_config(b.path())).unwrap();
    for e in &ra.manifest.entries {
        let rel = format!("quantities/{}.json", e.id);
        assert_eq!(read(&a.path().join(&rel)), read(&b.path().join(&rel)), "{rel}");
        let rel = format!("curves/{}/class_0001.csv", e.id);
        assert_eq!(read(&a.path().join(&rel)), read(&b.path().join(&rel)), "{rel}");
    }
    for rel in ["scatter.csv", "report.json", "zoo/manifest.json"] {
        assert_eq!(read(&a.path().join(rel)), read(&b.path().join(rel)), "{rel}");
    }
}

#[test]
fn outputs_embed_the_config_digest() {
    let dir = tempfile::tempdir().unwrap();
    let config = minimal_config(dir.path());
    let report = run_experiment(&config).unwrap();
    let digest = config.digest();
    assert_eq!(report.config_digest, digest);

    let manifest = ZooManifest::load(&dir.path().join("zoo/manifest.json")).unwrap();
    assert_eq!(manifest.config_digest, digest);
    for e in &manifest.entries {
        let q: Stamped<SparsityQuantities> = read_json(&dir.path().join(format!("quantities/{}.json", e.id))).unwrap();
        assert_eq!(q.config_digest, digest);
        assert_eq!(q.tool_version, ablg_core::TOOL_VERSION);
        assert_eq!(q.body, report.quantities.iter().find(|x| x.network_id == e.id).unwrap().clone());
        for (header, _) in read_curve_dir(&dir.path().join(format!("curves/{}", e.id))).unwrap() {
            assert_eq!(header.config_digest, digest);
            assert_eq!(header.network_id, e.id);
        }
    }
    let scatter = String::from_utf8(read(&dir.path().join("scatter.csv"))).unwrap();
    assert!(scatter.lines().next().unwrap().contains(&digest));
    assert_eq!(scatter.lines().count(), 2 + 2);
    let summary: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("report.json"))).unwrap();
    assert_eq!(summary["config_digest"], digest.as_str());
}

#[test]
fn output_dir_does_not_change_the_digest() {
    let a = minimal_config(Path::new("/tmp/a"));
    let mut b = minimal_config(Path::new("/tmp/b"));
    assert_eq!(a.digest(), b.digest());
    b.seed += 1;
    assert_ne!(a.digest(), b.digest());
}

#[test]
fn failing_stage_leaves_a_failure_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = minimal_config(dir.path());
    config.layer = LayerSelector::Index(99);
    let err = run_experiment(&config).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let failure: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("failures.json"))).unwrap();
    assert_eq!(failure["stage"], "ablate");
    assert_eq!(failure["completed"], serde_json::json!(["data", "zoo"]));
    assert_eq!(failure["config_digest"], config.digest().as_str());
    assert!(dir.path().join("zoo/manifest.json").is_file());
    assert!(!dir.path().join("quantities").exists());

    config.layer = LayerSelector::default();
    run_experiment(&config).unwrap();
    assert!(!dir.path().join("failures.json").exists());
}

#[test]
fn invalid_configs_fail_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = minimal_config(dir.path());
    config.protocol.train_fraction = 1.0;
    assert_eq!(run_experiment(&config).unwrap_err().exit_code(), 2);
    let mut config = minimal_config(dir.path());
    config.zoo.seeds.clear();
    assert_eq!(run_experiment(&config).unwrap_err().exit_code(), 2);
    let mut config = minimal_config(dir.path());
    config.layer = LayerSelector::Named("first".into());
    assert_eq!(run_experiment(&config).unwrap_err().exit_code(), 2);
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = minimal_config(&dir.path().join("out"));
    let path = dir.path().join("exp.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, config);
    assert_eq!(loaded.digest(), config.digest());

    std::fs::write(&path, "{\"seed\": 1}").unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap_err().exit_code(), 2);
}
