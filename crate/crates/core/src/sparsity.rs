//! Turning points and the two sparsity quantities derived from ablation curves.

use serde::{Deserialize, Serialize};

use crate::ablation::AblationCurve;
use crate::error::{Error, Result};

/// Flag raised when the descending curve never falls to chance level.
pub const FLAG_NEVER_REACHES_CHANCE: &str = "never_reaches_chance";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurningPoints {
    /// First removal count at which the descending curve is at or below chance.
    pub n0: usize,
    /// Largest removal count maximising the ascending curve.
    pub n0_r: usize,
    pub acc_chance: f64,
    /// `n0` was set to `M` because the curve never reached chance.
    pub degenerate: bool,
}

/// Smallest `n` with `curve[n] <= acc_chance`. Returns `(M, true)` when no
/// entry qualifies.
pub fn turning_point_desc(curve: &[f64], acc_chance: f64) -> (usize, bool) {
    match curve.iter().position(|&e| e <= acc_chance) {
        Some(n) => (n, false),
        None => (curve.len().saturating_sub(1), true),
    }
}

/// Largest `n` attaining the maximum of the ascending curve.
pub fn turning_point_asc(curve: &[f64]) -> usize {
    let mut best = 0;
    for (n, &e) in curve.iter().enumerate() {
        if e >= curve[best] {
            best = n;
        }
    }
    best
}

pub fn turning_points(descending: &[f64], ascending: &[f64], acc_chance: f64) -> TurningPoints {
    let (n0, degenerate) = turning_point_desc(descending, acc_chance);
    TurningPoints {
        n0,
        n0_r: turning_point_asc(ascending),
        acc_chance,
        degenerate,
    }
}

/// `(n0 + M - n0_r) / 2M`, in `[0, 1]`; smaller means sparser critical units.
pub fn zeta(n0: usize, n0_r: usize, units: usize) -> Result<f64> {
    if units == 0 {
        return Err(Error::domain("zeta needs at least one unit"));
    }
    if n0 > units || n0_r > units {
        return Err(Error::domain(format!("turning points ({n0}, {n0_r}) outside [0, {units}]")));
    }
    Ok((n0 + units - n0_r) as f64 / (2 * units) as f64)
}

/// `(1/M) * sum_{n=0..=M} |E_r(n) - E(n)|`, optionally divided by a training
/// accuracy. Sums `M + 1` terms, so the unnormalised value lies in `[0, (M+1)/M]`.
pub fn kappa(descending: &[f64], ascending: &[f64], units: usize, normalize_by: Option<f64>) -> Result<f64> {
    if units == 0 {
        return Err(Error::domain("kappa needs at least one unit"));
    }
    if descending.len() != units + 1 || ascending.len() != units + 1 {
        return Err(Error::domain(format!(
            "curves of length {} and {} for {units} units",
            descending.len(),
            ascending.len()
        )));
    }
    let area: f64 = descending.iter().zip(ascending).map(|(e, er)| (er - e).abs()).sum::<f64>() / units as f64;
    match normalize_by {
        None => Ok(area),
        Some(acc) if acc > 0.0 && acc.is_finite() => Ok(area / acc),
        Some(acc) => Err(Error::domain(format!("cannot normalise by training accuracy {acc}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Every per-class kappa divided by the network's training accuracy.
    TrainingAccuracy {
        accuracy: f64,
    },
}

/// Training accuracies that differ by more than this across a zoo switch on
/// kappa normalisation.
pub const NORMALIZATION_SPREAD: f64 = 0.01;

pub fn needs_normalization(train_accuracies: &[f64]) -> bool {
    let hi = train_accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = train_accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo > NORMALIZATION_SPREAD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuantities {
    pub class: usize,
    pub n0: usize,
    pub n0_r: usize,
    pub zeta: f64,
    pub kappa: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub zeta: f64,
    pub kappa: f64,
}

/// Arithmetic mean over classes.
pub fn fuse(per_class: &[ClassQuantities]) -> Result<Fused> {
    if per_class.is_empty() {
        return Err(Error::domain("cannot fuse zero classes"));
    }
    let n = per_class.len() as f64;
    Ok(Fused {
        zeta: per_class.iter().map(|q| q.zeta).sum::<f64>() / n,
        kappa: per_class.iter().map(|q| q.kappa).sum::<f64>() / n,
    })
}

/// Per-class and fused quantities of one network at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityQuantities {
    pub network_id: String,
    pub layer: usize,
    pub units: usize,
    pub acc_chance: f64,
    pub normalization: Normalization,
    pub per_class: Vec<ClassQuantities>,
    pub fused: Fused,
    /// Classes carrying at least one flag.
    pub flagged_classes: Vec<usize>,
}

/// Sample-weighted mean of the per-class baselines, i.e. the training accuracy
/// when the curves were measured per class on the training split.
pub fn training_accuracy(curves: &[AblationCurve]) -> f64 {
    let total: usize = curves.iter().map(|c| c.samples).sum();
    curves.iter().map(|c| c.baseline * c.samples as f64).sum::<f64>() / total as f64
}

pub fn quantify(network_id: &str, curves: &[AblationCurve], acc_chance: f64, normalize: bool) -> Result<SparsityQuantities> {
    let first = curves.first().ok_or_else(|| Error::domain("no curves to quantify"))?;
    let (layer, units) = (first.layer, first.units);
    if curves.iter().any(|c| c.layer != layer || c.units != units) {
        return Err(Error::domain("curves come from different layers"));
    }
    let normalization = if normalize {
        Normalization::TrainingAccuracy {
            accuracy: training_accuracy(curves),
        }
    } else {
        Normalization::None
    };
    let divisor = match normalization {
        Normalization::None => None,
        Normalization::TrainingAccuracy { accuracy } => Some(accuracy),
    };
    let per_class = curves
        .iter()
        .map(|c| {
            let tp = turning_points(&c.descending, &c.ascending, acc_chance);
            let mut flags = Vec::new();
            if tp.degenerate {
                flags.push(FLAG_NEVER_REACHES_CHANCE.to_string());
            }
            Ok(ClassQuantities {
                class: c.class,
                n0: tp.n0,
                n0_r: tp.n0_r,
                zeta: zeta(tp.n0, tp.n0_r, units)?,
                kappa: kappa(&c.descending, &c.ascending, units, divisor)?,
                flags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse(&per_class)?;
    let flagged_classes = per_class.iter().filter(|q| !q.flags.is_empty()).map(|q| q.class).collect();
    Ok(SparsityQuantities {
        network_id: network_id.to_string(),
        layer,
        units,
        acc_chance,
        normalization,
        per_class,
        fused,
        flagged_classes,
    })
}
