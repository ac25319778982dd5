//! Mini-batch SGD training of small networks and zoo construction.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_labels, LabeledDataset};
use crate::engine::{weights, LayerSpec, Network, NetworkMeta};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const BATCH_SIZES: [usize; 3] = [32, 64, 128];
pub const MOMENTA: [f64; 3] = [0.0, 0.5, 0.9];
pub const WEIGHT_DECAYS: [f64; 2] = [0.0, 1e-4];
pub const DROPOUT_RATES: [f32; 3] = [0.0, 0.3, 0.5];
pub const CORRUPTION_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture template, see [`template_layers`].
    pub template: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f32,
    pub corruption: f64,
    pub seed: u64,
    /// Multiply the learning rate by `lr_decay_factor` every `lr_decay_every`
    /// epochs; 0 keeps it constant.
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "one")]
    pub lr_decay_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            template: "cnn".into(),
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            dropout: 0.0,
            corruption: 0.0,
            seed: 0,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
        }
    }
}

fn one_of<T: PartialEq + std::fmt::Debug>(name: &str, value: T, allowed: &[T]) -> Result<()> {
    if allowed.contains(&value) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} {value:?} not in {allowed:?}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        one_of("batch size", self.batch_size, &BATCH_SIZES)?;
        one_of("momentum", self.momentum, &MOMENTA)?;
        one_of("weight decay", self.weight_decay, &WEIGHT_DECAYS)?;
        one_of("dropout", self.dropout, &DROPOUT_RATES)?;
        one_of("corruption fraction", self.corruption, &CORRUPTION_FRACTIONS)?;
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!("lr decay factor {} outside (0, 1]", self.lr_decay_factor)));
        }
        if self.epochs > 100_000 {
            return Err(Error::config("epoch budget above 100000"));
        }
        if !TEMPLATES.contains(&self.template.as_str()) {
            return Err(Error::config(format!(
                "unknown template `{}`, expected one of {TEMPLATES:?}",
                self.template
            )));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn digest(&self) -> String {
        crate::digest_json(self)
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            every => self.learning_rate * self.lr_decay_factor.powi((epoch / every) as i32),
        }
    }
}

pub const TEMPLATES: [&str; 5] = ["linear", "mlp", "toy-cnn", "cnn", "cnn-flat"];

/// Layer list of an architecture template. A dropout layer is inserted in
/// front of the classifier when `dropout > 0`.
pub fn template_layers(template: &str, input_shape: &[usize], num_classes: usize, dropout: f32) -> Result<Vec<LayerSpec>> {
    let flat: usize = input_shape.iter().product();
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let dense = |i, o| LayerSpec::Dense {
        in_features: i,
        out_features: o,
    };
    let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
    let image = || -> Result<(usize, usize, usize)> {
        match *input_shape {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::config(format!(
                "template `{template}` needs [C, H, W] input, got {input_shape:?}"
            ))),
        }
    };
    // body layers and the width of the features fed to the classifier
    let (mut layers, features) = match template {
        "linear" => (vec![LayerSpec::Flatten], flat),
        "mlp" => (vec![LayerSpec::Flatten, dense(flat, 64), LayerSpec::Relu], 64),
        "toy-cnn" => {
            let (c, h, w) = image()?;
            (
                vec![conv(c, 8), LayerSpec::Relu, conv(8, 16), LayerSpec::Relu, pool, LayerSpec::Flatten],
                16 * (h / 2) * (w / 2),
            )
        }
        "cnn" => {
            let (c, h, w) = image()?;
            (
                vec![
                    conv(c, 16),
                    LayerSpec::Relu,
                    pool.clone(),
                    conv(16, 32),
                    LayerSpec::Relu,
                    pool,
                    LayerSpec::Flatten,
                    dense(32 * (h / 4) * (w / 4), 64),
                    LayerSpec::Relu,
                ],
                64,
            )
        }
        "cnn-flat" => {
            let (c, h, w) = image()?;
            (
                vec![
                    conv(c, 16),
                    LayerSpec::Relu,
                    pool.clone(),
                    conv(16, 32),
                    LayerSpec::Relu,
                    pool,
                    LayerSpec::Flatten,
                ],
                32 * (h / 4) * (w / 4),
            )
        }
        other => return Err(Error::config(format!("unknown template `{other}`"))),
    };
    if dropout > 0.0 {
        layers.push(LayerSpec::Dropout { rate: dropout });
    }
    layers.push(dense(features, num_classes));
    Ok(layers)
}

/// One trained network's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    pub config: TrainConfig,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `train_accuracy - test_accuracy`.
    pub gap: f64,
    pub epoch_losses: Vec<f64>,
    /// Predicted classes on the (possibly corrupted) training split.
    pub train_predictions: Vec<usize>,
    pub test_predictions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<String>,
}

impl ZooEntry {
    /// Accuracy against the given labels from the stored predictions.
    pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
        let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub entry: ZooEntry,
    /// The training split with the configured corruption applied.
    pub train_set: LabeledDataset,
}

pub fn predict(net: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        out.extend(net.forward(&data.batch(chunk)?, None)?.argmax_rows());
    }
    Ok(out)
}

/// Builds the template network for `config` and its initial weights.
pub fn initial_network(config: &TrainConfig, train: &LabeledDataset, id: &str) -> Result<Network> {
    let specs = template_layers(&config.template, train.sample_shape(), train.num_classes(), config.dropout)?;
    let meta = NetworkMeta {
        id: id.to_string(),
        seed: config.seed,
        config_digest: config.digest(),
    };
    Network::init(train.sample_shape().to_vec(), specs, &mut rng::stream(config.seed, "init", 0), meta)
}

/// Trains a fresh template network on `train` (after applying the configured
/// label corruption) and scores it on `test`.
pub fn train(train: &LabeledDataset, test: &LabeledDataset, config: &TrainConfig) -> Result<Trained> {
    let id = format!("net-{}", &config.digest()[..12]);
    train_with_id(train, test, config, &id)
}

pub fn train_with_id(train: &LabeledDataset, test: &LabeledDataset, config: &TrainConfig, id: &str) -> Result<Trained> {
    config.validate()?;
    if train.num_classes() != test.num_classes() || train.sample_shape() != test.sample_shape() {
        return Err(Error::config("train and test splits describe different problems"));
    }
    let train_set = corrupt_labels(train, config.corruption, rng::child_seed(config.seed, "corruption", 0))?;
    let mut net = initial_network(config, &train_set, id)?;
    let mut velocity: Vec<Vec<f32>> = net.params().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut dropout_rng = rng::stream(config.seed, "dropout", epoch as u64);
        let lr = config.learning_rate_at(epoch) as f32;
        let (mu, wd) = (config.momentum as f32, config.weight_decay as f32);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let grads = net.loss_gradients(&batch, &labels, 1.0, Some(&mut dropout_rng))?;
            if !grads.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "loss is not finite".into(),
                });
            }
            total += grads.loss * chunk.len() as f64;
            let flat_grads = grads.params.iter().flatten();
            for ((param, grad), vel) in net.params_mut().zip(flat_grads).zip(velocity.iter_mut()) {
                for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                }
            }
        }
        let mean = total / train_set.len() as f64;
        if !mean.is_finite() || !net.params().all(Tensor::all_finite) {
            return Err(Error::Training {
                epoch,
                reason: "parameters diverged".into(),
            });
        }
        epoch_losses.push(mean);
    }
    let train_predictions = predict(&net, &train_set)?;
    let test_predictions = predict(&net, test)?;
    let train_accuracy = ZooEntry::accuracy_of(&train_predictions, train_set.labels());
    let test_accuracy = ZooEntry::accuracy_of(&test_predictions, test.labels());
    let entry = ZooEntry {
        id: id.to_string(),
        config: config.clone(),
        train_accuracy,
        test_accuracy,
        gap: train_accuracy - test_accuracy,
        epoch_losses,
        train_predictions,
        test_predictions,
        weights_path: None,
    };
    Ok(Trained {
        network: net,
        entry,
        train_set,
    })
}

/// Strategy axis of a zoo grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f32,
    pub batch_size: usize,
}

/// Cartesian grid of training configurations: seeds x strategies x corruption fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooGrid {
    pub base: TrainConfig,
    pub corruption: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

impl ZooGrid {
    pub fn single(config: TrainConfig) -> Self {
        Self {
            corruption: vec![config.corruption],
            strategies: vec![Strategy {
                momentum: config.momentum,
                weight_decay: config.weight_decay,
                dropout: config.dropout,
                batch_size: config.batch_size,
            }],
            seeds: vec![config.seed],
            base: config,
        }
    }

    pub fn expand(&self) -> Result<Vec<TrainConfig>> {
        if self.corruption.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("zoo grid has an empty axis"));
        }
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for s in &self.strategies {
                for &corruption in &self.corruption {
                    let c = TrainConfig {
                        momentum: s.momentum,
                        weight_decay: s.weight_decay,
                        dropout: s.dropout,
                        batch_size: s.batch_size,
                        corruption,
                        seed,
                        ..self.base.clone()
                    };
                    c.validate()?;
                    out.push(c);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooFailure {
    pub index: usize,
    pub id: String,
    pub error: String,
}

/// Result of a zoo build; failed members are listed, never dropped silently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub entries: Vec<ZooEntry>,
    pub failures: Vec<ZooFailure>,
    /// max(gap) - min(gap) over the successful entries.
    pub gap_spread: f64,
}

impl ZooManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A trained zoo member kept in memory.
#[derive(Debug, Clone)]
pub struct ZooMember {
    pub network: Network,
    pub entry: ZooEntry,
    pub train_set: LabeledDataset,
}

pub fn zoo_member_id(index: usize, config: &TrainConfig) -> String {
    format!("net-{index:03}-{}", &config.digest()[..8])
}

/// Trains `target_count` members from the grid. When the grid is shorter
/// than the target, it is cycled with seeds offset by the cycle number.
/// Weights and the manifest are written to `out_dir` when given.
pub fn build_zoo(
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &ZooGrid,
    target_count: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<(ZooManifest, Vec<ZooMember>)> {
    let base = grid.expand()?;
    let count = target_count.unwrap_or(base.len());
    let configs: Vec<TrainConfig> = (0..count)
        .map(|i| {
            let mut c = base[i % base.len()].clone();
            c.seed = c.seed.wrapping_add((i / base.len()) as u64);
            c
        })
        .collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<Trained>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let id = zoo_member_id(i, c);
            log::info!("training {id} (corruption {}, seed {})", c.corruption, c.seed);
            train_with_id(train, test, c, &id)
        })
        .collect();
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (i, (result, config)) in results.into_iter().zip(&configs).enumerate() {
        match result {
            Ok(mut t) => {
                if let Some(dir) = out_dir {
                    let path: PathBuf = dir.join(format!("{}.ablg", t.entry.id));
                    weights::save(&t.network, &path)?;
                    t.entry.weights_path = Some(format!("{}.ablg", t.entry.id));
                }
                members.push(ZooMember {
                    network: t.network,
                    entry: t.entry,
                    train_set: t.train_set,
                });
            }
            Err(e) => failures.push(ZooFailure {
                index: i,
                id: zoo_member_id(i, config),
                error: e.to_string(),
            }),
        }
    }
    let gaps = members.iter().map(|m| m.entry.gap);
    let gap_spread = match gaps.clone().reduce(f64::max).zip(gaps.reduce(f64::min)) {
        Some((hi, lo)) => hi - lo,
        None => 0.0,
    };
    let manifest = ZooManifest {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_digest: crate::digest_json(grid),
        entries: members.iter().map(|m| m.entry.clone()).collect(),
        failures,
        gap_spread,
    };
    if let Some(dir) = out_dir {
        manifest.save(&dir.join("manifest.json"))?;
    }
    Ok((manifest, members))
}
