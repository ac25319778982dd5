//! End-to-end experiment driver.
//!
//! [`run_experiment`] trains a zoo, ablates every member, computes the
//! sparsity quantities, fits and evaluates the gap model and the margin
//! baseline, and writes everything below the configured output directory:
//!
//! ```text
//! data/{train,test}.ds
//! zoo/manifest.json, zoo/<id>.ablg, zoo/<id>.train.ds
//! curves/<id>/class_NNNN.csv
//! quantities/<id>.json
//! margins/<id>.json
//! model.json  eval.json  margin.json  scatter.csv  report.json
//! failures.json            (only when a stage fails)
//! ```
//!
//! Randomness derives from the single experiment seed: the data generator
//! uses `child_seed(seed, "data", 0)`, grid seed `s` becomes
//! `child_seed(seed, "zoo", s)` and the split protocol uses
//! `child_seed(seed, "protocol", 0)`.

mod io;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{curve_file_name, read_curve, read_curve_dir, read_json, write_curve, write_json, CurveHeader, Stamped};

use crate::ablation::{sweep_all, AblationCurve, EvalMode};
use crate::data::{format as dsformat, LabeledDataset, SyntheticSpec};
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::estimator::{self, GapSample, LinearGapModel, LinearModel, ProtocolReport};
use crate::margin::{self, MarginDistribution, REGRESSION_FEATURES};
use crate::rng;
use crate::sparsity::{self, SparsityQuantities};
use crate::trainer::{build_zoo, ZooEntry, ZooGrid, ZooManifest};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "ABLG_WORKERS";

/// Sizes the global worker pool from [`WORKERS_ENV`]; a no-op when unset or
/// when the pool already exists.
pub fn configure_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{WORKERS_ENV}={value:?} is not a positive integer")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files { train: PathBuf, test: PathBuf },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSource::Synthetic(spec) => SyntheticSpec {
                seed: rng::child_seed(seed, "data", 0),
                ..spec.clone()
            }
            .generate(),
            DataSource::Files { train, test } => Ok((dsformat::load(train)?, dsformat::load(test)?)),
        }
    }
}

/// Ablation layer: `"last-conv"` or an explicit layer index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelector {
    Index(usize),
    Named(String),
}

impl Default for LayerSelector {
    fn default() -> Self {
        LayerSelector::Named("last-conv".into())
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<usize>() {
            Ok(i) => Ok(LayerSelector::Index(i)),
            Err(_) if s == "last-conv" => Ok(LayerSelector::Named(s.into())),
            Err(_) => Err(Error::config(format!("layer selector `{s}` is neither `last-conv` nor an index"))),
        }
    }
}

impl LayerSelector {
    pub fn resolve(&self, net: &Network) -> Result<usize> {
        match self {
            LayerSelector::Index(i) => {
                net.unit_count(*i)
                    .map_err(|e| Error::config(format!("layer selector {i} does not fit network `{}`: {e}", net.meta.id)))?;
                Ok(*i)
            }
            LayerSelector::Named(name) if name == "last-conv" => net
                .last_conv_layer()
                .ok_or_else(|| Error::config(format!("network `{}` has no convolution layer", net.meta.id))),
            LayerSelector::Named(name) => Err(Error::config(format!("unknown layer selector `{name}`"))),
        }
    }
}

/// When to divide κ by the training accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationPolicy {
    /// Normalize when the zoo's training accuracies spread by more than
    /// [`sparsity::NORMALIZATION_SPREAD`].
    #[default]
    Auto,
    None,
    TrainingAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub train_fraction: f64,
    pub repeats: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            repeats: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub zoo: ZooGrid,
    /// Zoo size; defaults to the grid size, larger values cycle the grid with
    /// shifted seeds.
    #[serde(default)]
    pub zoo_size: Option<usize>,
    #[serde(default)]
    pub layer: LayerSelector,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub normalization: NormalizationPolicy,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default = "yes")]
    pub margins: bool,
    /// Not part of the digest.
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate()?,
            DataSource::Files { train, test } => {
                for p in [train, test] {
                    if !p.is_file() {
                        return Err(Error::config(format!("dataset {} does not exist", p.display())));
                    }
                }
            }
        }
        let size = self.zoo.expand()?.len();
        if self.zoo_size == Some(0) || size == 0 {
            return Err(Error::config("the zoo is empty"));
        }
        if let LayerSelector::Named(name) = &self.layer {
            if name != "last-conv" {
                return Err(Error::config(format!("unknown layer selector `{name}`")));
            }
        }
        let p = &self.protocol;
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) || p.repeats == 0 {
            return Err(Error::config("protocol needs a train fraction in (0, 1) and at least one repeat"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir is empty"));
        }
        Ok(())
    }

    /// Digest of everything that affects results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        crate::digest_json(&c)
    }

    fn seeded_grid(&self) -> ZooGrid {
        let mut grid = self.zoo.clone();
        for s in &mut grid.seeds {
            *s = rng::child_seed(self.seed, "zoo", *s);
        }
        grid
    }
}

/// One row of the (ζ, κ, gap) scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub network_id: String,
    pub zeta: f64,
    pub kappa: f64,
    pub gap: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub corruption: f64,
}

/// Margin baseline next to the sparsity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginComparison {
    pub margin_model: LinearModel,
    pub margin_protocol: ProtocolReport,
    pub sparsity_pearson: Option<f64>,
    pub sparsity_ssr: f64,
    pub margin_pearson: Option<f64>,
    pub margin_ssr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub networks: usize,
    pub failed_networks: usize,
    pub gap_spread: f64,
    pub normalized: bool,
    pub pearson_zeta_gap: Option<f64>,
    pub pearson_kappa_gap: Option<f64>,
    pub model: Option<LinearGapModel>,
    pub median_test_ssr: Option<f64>,
    pub median_test_mean_squared: Option<f64>,
    pub median_baseline_mean_squared: Option<f64>,
    pub margin_pearson: Option<f64>,
    pub margin_ssr: Option<f64>,
    /// Stages left out because the zoo is too small for them.
    pub skipped: Vec<String>,
}

/// In-memory results of a run; the same data is on disk.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub manifest: ZooManifest,
    pub curves: Vec<Vec<AblationCurve>>,
    pub quantities: Vec<SparsityQuantities>,
    pub model: Option<LinearGapModel>,
    pub protocol: Option<ProtocolReport>,
    pub margins: Option<MarginComparison>,
    pub scatter: Vec<ScatterPoint>,
    pub summary: ReportSummary,
}

#[derive(Debug, Serialize)]
struct FailureReport<'a> {
    stage: &'a str,
    error: String,
    completed: &'a [&'a str],
}

/// Runs the whole pipeline. On failure the outputs of completed stages stay in
/// place and `failures.json` names the failing stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let _ = std::fs::remove_file(out.join("failures.json"));
    let mut pipeline = Pipeline {
        config,
        digest: config.digest(),
        completed: Vec::new(),
    };
    match pipeline.run() {
        Ok(report) => Ok(report),
        Err((stage, e)) => {
            let failure = Stamped::new(
                &pipeline.digest,
                FailureReport {
                    stage,
                    error: e.to_string(),
                    completed: &pipeline.completed,
                },
            );
            write_json(&out.join("failures.json"), &failure)?;
            Err(e)
        }
    }
}

struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    digest: String,
    completed: Vec<&'static str>,
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

impl Pipeline<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&Self) -> Result<T>) -> StageResult<T> {
        log::info!("stage {name}");
        let value = f(self).map_err(|e| (name, e))?;
        self.completed.push(name);
        Ok(value)
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.output_dir.join(rel)
    }

    fn run(&mut self) -> StageResult<ExperimentReport> {
        let cfg = self.config;
        let (train, test) = self.stage("data", |p| {
            let (train, test) = cfg.data.load(cfg.seed)?;
            std::fs::create_dir_all(p.path("data"))?;
            dsformat::save(&train, &p.path("data/train.ds"), dsformat::Payload::F32)?;
            dsformat::save(&test, &p.path("data/test.ds"), dsformat::Payload::F32)?;
            Ok((train, test))
        })?;

        let (manifest, members) = self.stage("zoo", |p| {
            let zoo_dir = p.path("zoo");
            let (mut manifest, members) = build_zoo(&train, &test, &cfg.seeded_grid(), cfg.zoo_size, Some(&zoo_dir))?;
            for m in &members {
                dsformat::save(
                    &m.train_set,
                    &zoo_dir.join(format!("{}.train.ds", m.entry.id)),
                    dsformat::Payload::F32,
                )?;
            }
            manifest.config_digest = p.digest.clone();
            manifest.save(&zoo_dir.join("manifest.json"))?;
            if members.is_empty() {
                return Err(Error::domain("every zoo member failed to train"));
            }
            Ok((manifest, members))
        })?;

        let curves = self.stage("ablate", |p| {
            let curves = members
                .par_iter()
                .map(|m| {
                    let layer = cfg.layer.resolve(&m.network)?;
                    sweep_all(&m.network, &m.train_set, layer, cfg.eval_mode)
                })
                .collect::<Result<Vec<_>>>()?;
            for (m, cs) in members.iter().zip(&curves) {
                let dir = p.path(Path::new("curves").join(&m.entry.id));
                for c in cs {
                    write_curve(&dir.join(curve_file_name(c.class)), &m.entry.id, train.num_classes(), &p.digest, c)?;
                }
            }
            Ok(curves)
        })?;

        let quantities = self.stage("quantify", |p| {
            let normalize = match cfg.normalization {
                NormalizationPolicy::None => false,
                NormalizationPolicy::TrainingAccuracy => true,
                NormalizationPolicy::Auto => {
                    let accs: Vec<f64> = curves.iter().map(|c| sparsity::training_accuracy(c)).collect();
                    sparsity::needs_normalization(&accs)
                }
            };
            let chance = 1.0 / train.num_classes() as f64;
            let qs = members
                .iter()
                .zip(&curves)
                .map(|(m, c)| sparsity::quantify(&m.entry.id, c, chance, normalize))
                .collect::<Result<Vec<_>>>()?;
            for q in &qs {
                write_json(&p.path(format!("quantities/{}.json", q.network_id)), &Stamped::new(&p.digest, q))?;
            }
            Ok(qs)
        })?;

        let samples: Vec<GapSample> = members
            .iter()
            .zip(&quantities)
            .map(|(m, q)| GapSample {
                network_id: m.entry.id.clone(),
                zeta: q.fused.zeta,
                kappa: q.fused.kappa,
                gap: m.entry.gap,
            })
            .collect();
        let gaps: Vec<f64> = samples.iter().map(|s| s.gap).collect();

        let n = samples.len();
        let mut skipped = Vec::new();
        let model = if n >= 3 {
            Some(self.stage("fit", |p| {
                let model = estimator::fit(&samples)?;
                write_json(&p.path("model.json"), &Stamped::new(&p.digest, &model))?;
                Ok(model)
            })?)
        } else {
            skipped.push(format!("fit: {n} networks, need 3"));
            None
        };

        let protocol_seed = rng::child_seed(cfg.seed, "protocol", 0);
        let fraction = cfg.protocol.train_fraction;
        let split_fits = |min_train: usize| {
            let train_n = (fraction * n as f64).round() as usize;
            train_n >= min_train && train_n < n
        };
        let protocol = if split_fits(3) {
            Some(self.stage("evaluate", |p| {
                let report = estimator::evaluate_protocol(&samples, fraction, cfg.protocol.repeats, protocol_seed)?;
                write_json(&p.path("eval.json"), &Stamped::new(&p.digest, &report))?;
                Ok(report)
            })?)
        } else {
            skipped.push(format!("evaluate: {n} networks cannot be split at fraction {fraction}"));
            None
        };

        let margins = if !cfg.margins {
            None
        } else {
            let dists = self.stage("margin", |p| {
                let dists = members
                    .par_iter()
                    .map(|m| margin::margin_distribution(&m.network, &m.train_set))
                    .collect::<Result<Vec<MarginDistribution>>>()?;
                for d in &dists {
                    write_json(&p.path(format!("margins/{}.json", d.network_id)), &Stamped::new(&p.digest, d))?;
                }
                Ok(dists)
            })?;
            match (&model, split_fits(4)) {
                (Some(model), true) => Some(self.stage("margin-fit", |p| {
                    let features: Vec<_> = dists.iter().map(|d| d.features).collect();
                    let margin_model = margin::fit_margin_model(&features, &gaps)?;
                    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.regression_row()).collect();
                    let splits = estimator::random_splits(n, fraction, cfg.protocol.repeats, protocol_seed, 4)?;
                    let margin_protocol = estimator::evaluate_splits(&rows, &gaps, &REGRESSION_FEATURES, &splits, fraction, protocol_seed)?;
                    let cmp = MarginComparison {
                        sparsity_pearson: model.diagnostics.pearson,
                        sparsity_ssr: model.diagnostics.ssr,
                        margin_pearson: margin_model.diagnostics.pearson,
                        margin_ssr: margin_model.diagnostics.ssr,
                        margin_model,
                        margin_protocol,
                    };
                    write_json(&p.path("margin.json"), &Stamped::new(&p.digest, &cmp))?;
                    Ok(cmp)
                })?),
                _ => {
                    skipped.push(format!("margin-fit: {n} networks are too few for the margin model"));
                    None
                }
            }
        };

        let scatter: Vec<ScatterPoint> = members.iter().zip(&quantities).map(|(m, q)| scatter_point(&m.entry, q)).collect();
        let summary = self.stage("report", |p| {
            write_scatter(&p.path("scatter.csv"), &p.digest, &scatter)?;
            let zetas: Vec<f64> = samples.iter().map(|s| s.zeta).collect();
            let kappas: Vec<f64> = samples.iter().map(|s| s.kappa).collect();
            let summary = ReportSummary {
                networks: members.len(),
                failed_networks: manifest.failures.len(),
                gap_spread: manifest.gap_spread,
                normalized: quantities.iter().any(|q| q.normalization != sparsity::Normalization::None),
                pearson_zeta_gap: estimator::pearson(&zetas, &gaps).ok(),
                pearson_kappa_gap: estimator::pearson(&kappas, &gaps).ok(),
                model: model.clone(),
                median_test_ssr: protocol.as_ref().map(|r| r.summary.median_test_ssr),
                median_test_mean_squared: protocol.as_ref().map(|r| r.summary.median_test_mean_squared),
                median_baseline_mean_squared: protocol.as_ref().map(|r| r.summary.median_baseline_mean_squared),
                margin_pearson: margins.as_ref().and_then(|m| m.margin_pearson),
                margin_ssr: margins.as_ref().map(|m| m.margin_ssr),
                skipped,
            };
            write_json(&p.path("report.json"), &Stamped::new(&p.digest, &summary))?;
            Ok(summary)
        })?;

        Ok(ExperimentReport {
            config_digest: self.digest.clone(),
            manifest,
            curves,
            quantities,
            model,
            protocol,
            margins,
            scatter,
            summary,
        })
    }
}

fn scatter_point(entry: &ZooEntry, q: &SparsityQuantities) -> ScatterPoint {
    ScatterPoint {
        network_id: entry.id.clone(),
        zeta: q.fused.zeta,
        kappa: q.fused.kappa,
        gap: entry.gap,
        train_accuracy: entry.train_accuracy,
        test_accuracy: entry.test_accuracy,
        corruption: entry.config.corruption,
    }
}

fn write_scatter(path: &Path, digest: &str, points: &[ScatterPoint]) -> Result<()> {
    let header = serde_json::json!({ "tool_version": crate::TOOL_VERSION, "config_digest": digest });
    let mut out = format!("# {header}\nnetwork_id,zeta,kappa,gap,train_accuracy,test_accuracy,corruption\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.network_id, p.zeta, p.kappa, p.gap, p.train_accuracy, p.test_accuracy, p.corruption
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_selector_parsing() {
        assert_eq!("3".parse::<LayerSelector>().unwrap(), LayerSelector::Index(3));
        assert_eq!("last-conv".parse::<LayerSelector>().unwrap(), LayerSelector::default());
        assert!("first".parse::<LayerSelector>().is_err());
        let json: LayerSelector = serde_json::from_str("\"last-conv\"").unwrap();
        assert_eq!(json, LayerSelector::default());
    }
}
