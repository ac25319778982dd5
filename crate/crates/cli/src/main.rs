//! `ablg`: train network zoos, ablate units, and estimate generalization gaps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ablg_core::ablation::{self, EvalMode};
use ablg_core::data::{format as dsformat, SyntheticSpec};
use ablg_core::engine::weights;
use ablg_core::estimator::{self, GapSample, LinearGapModel};
use ablg_core::harness::{self, read_curve_dir, read_json, write_curve, write_json, ExperimentConfig, LayerSelector, Stamped};
use ablg_core::sparsity::{self, SparsityQuantities};
use ablg_core::trainer::{build_zoo, ZooGrid, ZooManifest};
use ablg_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ablg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset pair.
    GenData {
        /// Generator settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configuration of a grid.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Test split used for the generalization gap.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of networks; cycles the grid with shifted seeds.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Record ablation curves for one network.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `last-conv` or a layer index.
        #[arg(long, default_value = "last-conv")]
        layer: LayerSelector,
        /// `all` or a comma-separated class list.
        #[arg(long, default_value = "all")]
        classes: String,
        #[arg(long, value_enum, default_value_t = Mode::PerClass)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a directory of curves into ζ and κ.
    Quantify {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Divide κ by the network's training accuracy.
        #[arg(long)]
        normalize: bool,
        /// Chance level; defaults to 1/N.
        #[arg(long)]
        chance: Option<f64>,
    },
    /// Fit the linear gap model.
    Fit {
        #[arg(long, num_args = 1.., required = true)]
        quantities: Vec<PathBuf>,
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict gaps from a fitted model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        quantities: Vec<PathBuf>,
    },
    /// Repeated random-split evaluation of the gap model.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        quantities: Vec<PathBuf>,
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long, default_value_t = 0.9)]
        train_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Margin distribution of one network.
    Margin {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the per-sample distances in the output.
        #[arg(long)]
        raw: bool,
    },
    /// Run a full experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerClass,
    WholeDataset,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerClass => EvalMode::PerClass,
            Mode::WholeDataset => EvalMode::WholeDataset,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match harness::configure_workers().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let spec: SyntheticSpec = match config {
                Some(p) => read_config(&p)?,
                None => SyntheticSpec::default(),
            };
            let (train, test) = spec.generate()?;
            std::fs::create_dir_all(&out)?;
            dsformat::save(&train, &out.join("train.ds"), dsformat::Payload::F32)?;
            dsformat::save(&test, &out.join("test.ds"), dsformat::Payload::F32)?;
            Ok(())
        }
        Command::Train {
            config,
            data,
            test,
            out,
            count,
        } => {
            let grid: ZooGrid = read_config(&config)?;
            let (train, test) = (dsformat::load(&data)?, dsformat::load(&test)?);
            let (manifest, members) = build_zoo(&train, &test, &grid, count, Some(&out))?;
            for m in &members {
                dsformat::save(&m.train_set, &out.join(format!("{}.train.ds", m.entry.id)), dsformat::Payload::F32)?;
            }
            for f in &manifest.failures {
                eprintln!("member {} failed: {}", f.id, f.error);
            }
            if members.is_empty() {
                return Err(Error::Training {
                    epoch: 0,
                    reason: "every zoo member failed".into(),
                });
            }
            Ok(())
        }
        Command::Ablate {
            model,
            data,
            layer,
            classes,
            mode,
            out,
        } => {
            let net = weights::load(&model)?;
            let data = dsformat::load(&data)?;
            let layer = layer.resolve(&net)?;
            let classes: Vec<usize> = if classes == "all" {
                (0..data.num_classes()).collect()
            } else {
                classes
                    .split(',')
                    .map(|c| c.trim().parse().map_err(|_| Error::Config(format!("bad class `{c}`"))))
                    .collect::<Result<_>>()?
            };
            let digest = net.meta.config_digest.clone();
            for class in classes {
                let curve = ablation::sweep_class(&net, &data, class, layer, mode.into())?;
                write_curve(
                    &out.join(harness::curve_file_name(class)),
                    &net.meta.id,
                    data.num_classes(),
                    &digest,
                    &curve,
                )?;
            }
            Ok(())
        }
        Command::Quantify {
            curves,
            out,
            normalize,
            chance,
        } => {
            let read = read_curve_dir(&curves)?;
            let header = read[0].0.clone();
            let curves: Vec<_> = read.into_iter().map(|(_, c)| c).collect();
            let chance = chance.unwrap_or(1.0 / header.num_classes as f64);
            let q = sparsity::quantify(&header.network_id, &curves, chance, normalize)?;
            write_json(&out, &Stamped::new(&header.config_digest, q))
        }
        Command::Fit { quantities, gaps, out } => {
            let samples = gap_samples(&quantities, &gaps)?;
            let model = estimator::fit(&samples)?;
            write_json(&out, &Stamped::new(&ZooManifest::load(&gaps)?.config_digest, model))
        }
        Command::Predict { model, quantities } => {
            let model = LinearGapModel::load(&model)?;
            #[derive(Serialize)]
            struct Prediction {
                network_id: String,
                zeta: f64,
                kappa: f64,
                predicted_gap: f64,
            }
            let out = quantities
                .iter()
                .map(|p| {
                    let q = load_quantities(p)?;
                    Ok(Prediction {
                        predicted_gap: model.predict(q.fused.zeta, q.fused.kappa),
                        network_id: q.network_id,
                        zeta: q.fused.zeta,
                        kappa: q.fused.kappa,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            print_json(&out)
        }
        Command::Evaluate {
            quantities,
            gaps,
            repeats,
            train_frac,
            seed,
            out,
        } => {
            let samples = gap_samples(&quantities, &gaps)?;
            let report = estimator::evaluate_protocol(&samples, train_frac, repeats, seed)?;
            write_json(&out, &Stamped::new(&ZooManifest::load(&gaps)?.config_digest, report))
        }
        Command::Margin { model, data, out, raw } => {
            let net = weights::load(&model)?;
            let data = dsformat::load(&data)?;
            let mut dist = ablg_core::margin::margin_distribution(&net, &data)?;
            if !raw {
                dist.distances.clear();
            }
            write_json(&out, &Stamped::new(&net.meta.config_digest, dist))
        }
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let report = harness::run_experiment(&config)?;
            print_json(&report.summary)
        }
    }
}

fn load_quantities(path: &Path) -> Result<SparsityQuantities> {
    Ok(read_json::<Stamped<SparsityQuantities>>(path)?.body)
}

/// Pairs quantity files with the gaps recorded in a zoo manifest.
fn gap_samples(quantities: &[PathBuf], manifest: &Path) -> Result<Vec<GapSample>> {
    let manifest = ZooManifest::load(manifest)?;
    quantities
        .iter()
        .map(|p| {
            let q = load_quantities(p)?;
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.id == q.network_id)
                .ok_or_else(|| Error::Config(format!("network `{}` is not in the manifest", q.network_id)))?;
            Ok(GapSample {
                network_id: q.network_id,
                zeta: q.fused.zeta,
                kappa: q.fused.kappa,
                gap: entry.gap,
            })
        })
        .collect()
}
