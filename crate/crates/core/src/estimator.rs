//! Linear gap model, least squares, fit diagnostics and the repeated
//! split-evaluation protocol.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Least-squares solution of `design * beta ~ targets` by Householder QR.
///
/// `design` is row-major with one row per observation; `names` label the
/// columns for rank-deficiency diagnostics.
pub fn least_squares(design: &[Vec<f64>], targets: &[f64], names: &[&str]) -> Result<Vec<f64>> {
    let n = design.len();
    let p = names.len();
    if targets.len() != n {
        return Err(Error::domain(format!("{n} rows but {} targets", targets.len())));
    }
    if design.iter().any(|r| r.len() != p) {
        return Err(Error::domain(format!("every design row needs {p} columns")));
    }
    if design.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value in least-squares input"));
    }
    if n < p {
        return Err(Error::SingularFit {
            column: names[n].to_string(),
        });
    }
    // column-major working copy
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| design.iter().map(|r| r[j]).collect()).collect();
    let mut y = targets.to_vec();
    for k in 0..p {
        let original_norm = a[k].iter().map(|v| v * v).sum::<f64>().sqrt();
        let tail_norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if original_norm == 0.0 || tail_norm <= 1e-10 * original_norm {
            return Err(Error::SingularFit {
                column: names[k].to_string(),
            });
        }
        let alpha = if a[k][k] > 0.0 { -tail_norm } else { tail_norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vnorm2;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= s * vi;
            }
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut y[k..]);
    }
    // back substitution on R beta = Q^T y
    let mut beta = vec![0.0; p];
    for k in (0..p).rev() {
        let s: f64 = (k + 1..p).map(|j| a[j][k] * beta[j]).sum();
        beta[k] = (y[k] - s) / a[k][k];
    }
    Ok(beta)
}

/// Sum of squared residuals.
pub fn ssr(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::domain(format!(
            "ssr needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    Ok(predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// One network's fused sparsity quantities and its true gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSample {
    pub network_id: String,
    pub zeta: f64,
    pub kappa: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub samples: usize,
    /// Pearson r between fitted and true values; absent when undefined.
    pub pearson: Option<f64>,
    pub ssr: f64,
}

/// Linear model over named features plus an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub diagnostics: FitDiagnostics,
}

impl LinearModel {
    pub fn fit(rows: &[Vec<f64>], targets: &[f64], features: &[&str]) -> Result<Self> {
        let design: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().copied().chain(std::iter::once(1.0)).collect())
            .collect();
        let mut names: Vec<&str> = features.to_vec();
        names.push("intercept");
        let beta = least_squares(&design, targets, &names)?;
        let mut model = Self {
            features: features.iter().map(|s| s.to_string()).collect(),
            intercept: beta[features.len()],
            coefficients: beta[..features.len()].to_vec(),
            diagnostics: FitDiagnostics {
                samples: rows.len(),
                pearson: None,
                ssr: 0.0,
            },
        };
        let fitted: Vec<f64> = rows.iter().map(|r| model.predict(r)).collect();
        model.diagnostics.ssr = ssr(&fitted, targets)?;
        model.diagnostics.pearson = pearson(&fitted, targets).ok();
        Ok(model)
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(row).map(|(c, x)| c * x).sum::<f64>()
    }
}

/// `g = a * zeta + b * kappa + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGapModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub diagnostics: FitDiagnostics,
}

impl LinearGapModel {
    pub fn predict(&self, zeta: f64, kappa: f64) -> f64 {
        self.a * zeta + self.b * kappa + self.c
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn predict(model: &LinearGapModel, zeta: f64, kappa: f64) -> f64 {
    model.predict(zeta, kappa)
}

fn check_samples(samples: &[GapSample]) -> Result<()> {
    for s in samples {
        if !(s.zeta.is_finite() && s.kappa.is_finite() && s.gap.is_finite()) || !(-1.0..=1.0).contains(&s.gap) {
            return Err(Error::domain(format!("invalid gap sample for `{}`", s.network_id)));
        }
    }
    Ok(())
}

/// Least-squares fit of the gap model.
pub fn fit(samples: &[GapSample]) -> Result<LinearGapModel> {
    if samples.len() < 3 {
        return Err(Error::domain(format!("need at least 3 samples, got {}", samples.len())));
    }
    check_samples(samples)?;
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| vec![s.zeta, s.kappa]).collect();
    let gaps: Vec<f64> = samples.iter().map(|s| s.gap).collect();
    let m = LinearModel::fit(&rows, &gaps, &["zeta", "kappa"])?;
    Ok(LinearGapModel {
        a: m.coefficients[0],
        b: m.coefficients[1],
        c: m.intercept,
        diagnostics: m.diagnostics,
    })
}

/// Train/test index split of one protocol repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniform splits without replacement; repeat `r` draws from its own stream.
pub fn random_splits(n: usize, train_fraction: f64, repeats: usize, seed: u64, min_train: usize) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    if repeats == 0 {
        return Err(Error::domain("at least one repeat required"));
    }
    let train_n = (train_fraction * n as f64).round() as usize;
    if train_n < min_train || train_n >= n {
        return Err(Error::domain(format!(
            "{n} samples at fraction {train_fraction} give a {train_n}/{} split; need >= {min_train} train and >= 1 test",
            n.saturating_sub(train_n)
        )));
    }
    Ok((0..repeats)
        .map(|r| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, "protocol-split", r as u64));
            let (mut train, mut test) = (idx[..train_n].to_vec(), idx[train_n..].to_vec());
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub index: usize,
    pub split: Split,
    pub model: LinearModel,
    pub test_predictions: Vec<f64>,
    pub test_ssr: f64,
    /// Test SSR divided by the number of held-out networks.
    pub test_mean_squared: f64,
    /// Same quantities for the constant predictor equal to the mean training gap.
    pub baseline_ssr: f64,
    pub baseline_mean_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub median_test_ssr: f64,
    pub mean_test_ssr: f64,
    pub max_test_ssr: f64,
    pub median_test_mean_squared: f64,
    pub median_baseline_mean_squared: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub features: Vec<String>,
    pub train_fraction: f64,
    pub seed: u64,
    pub repeats: Vec<RepeatResult>,
    pub summary: ProtocolSummary,
}

/// Fits a linear model on each training split and scores it on the held-out part.
pub fn evaluate_splits(
    rows: &[Vec<f64>],
    targets: &[f64],
    features: &[&str],
    splits: &[Split],
    train_fraction: f64,
    seed: u64,
) -> Result<ProtocolReport> {
    let repeats = splits
        .par_iter()
        .enumerate()
        .map(|(index, split)| {
            let pick_rows = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
            let pick = |idx: &[usize]| idx.iter().map(|&i| targets[i]).collect::<Vec<_>>();
            let model = LinearModel::fit(&pick_rows(&split.train), &pick(&split.train), features)?;
            let truth = pick(&split.test);
            let test_predictions: Vec<f64> = split.test.iter().map(|&i| model.predict(&rows[i])).collect();
            let test_ssr = ssr(&test_predictions, &truth)?;
            let train_targets = pick(&split.train);
            let mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
            let baseline_ssr = ssr(&vec![mean; truth.len()], &truth)?;
            Ok(RepeatResult {
                index,
                split: split.clone(),
                model,
                test_predictions,
                test_ssr,
                test_mean_squared: test_ssr / truth.len() as f64,
                baseline_ssr,
                baseline_mean_squared: baseline_ssr / truth.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ssrs: Vec<f64> = repeats.iter().map(|r| r.test_ssr).collect();
    let summary = ProtocolSummary {
        median_test_ssr: median(&ssrs),
        mean_test_ssr: ssrs.iter().sum::<f64>() / ssrs.len() as f64,
        max_test_ssr: ssrs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_test_mean_squared: median(&repeats.iter().map(|r| r.test_mean_squared).collect::<Vec<_>>()),
        median_baseline_mean_squared: median(&repeats.iter().map(|r| r.baseline_mean_squared).collect::<Vec<_>>()),
        histogram: histogram(&ssrs, 10),
    };
    Ok(ProtocolReport {
        features: features.iter().map(|s| s.to_string()).collect(),
        train_fraction,
        seed,
        repeats,
        summary,
    })
}

/// Repeated random-split evaluation of the gap model.
pub fn evaluate_protocol(samples: &[GapSample], train_fraction: f64, repeats: usize, seed: u64) -> Result<ProtocolReport> {
    check_samples(samples)?;
    let splits = random_splits(samples.len(), train_fraction, repeats, seed, 3)?;
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| vec![s.zeta, s.kappa]).collect();
    let gaps: Vec<f64> = samples.iter().map(|s| s.gap).collect();
    evaluate_splits(&rows, &gaps, &["zeta", "kappa"], &splits, train_fraction, seed)
}
