//! Report file formats: stamped JSON documents and ablation-curve CSV files.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{AblationCurve, EvalMode};
use crate::error::{Error, Result};

/// A JSON document tagged with the producing tool and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub tool_version: String,
    pub config_digest: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Stamped<T> {
    pub fn new(config_digest: &str, body: T) -> Self {
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_digest: config_digest.to_string(),
            body,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

/// First line of a curve file, after the `# ` prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveHeader {
    pub network_id: String,
    pub class: usize,
    pub num_classes: usize,
    pub layer: usize,
    pub units: usize,
    pub samples: usize,
    pub mode: EvalMode,
    pub baseline: f64,
    pub tool_version: String,
    pub config_digest: String,
}

pub fn curve_file_name(class: usize) -> String {
    format!("class_{class:04}.csv")
}

/// Writes one curve as a `# {json header}` line followed by `n,E,E_r` rows.
pub fn write_curve(path: &Path, network_id: &str, num_classes: usize, config_digest: &str, curve: &AblationCurve) -> Result<()> {
    let header = CurveHeader {
        network_id: network_id.to_string(),
        class: curve.class,
        num_classes,
        layer: curve.layer,
        units: curve.units,
        samples: curve.samples,
        mode: curve.mode,
        baseline: curve.baseline,
        tool_version: crate::TOOL_VERSION.to_string(),
        config_digest: config_digest.to_string(),
    };
    let mut out = format!("# {}\nn,E,E_r\n", serde_json::to_string(&header)?);
    for (n, (e, er)) in curve.descending.iter().zip(&curve.ascending).enumerate() {
        out.push_str(&format!("{n},{e},{er}\n"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<(CurveHeader, AblationCurve)> {
    let text = std::fs::read_to_string(path)?;
    let bad = |offset: usize, why: &str| Error::format(offset as u64, format!("{}: {why}", path.display()));
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| bad(0, "empty curve file"))?;
    let json = first
        .trim_end()
        .strip_prefix("# ")
        .ok_or_else(|| bad(0, "missing `# ` header line"))?;
    let header: CurveHeader = serde_json::from_str(json).map_err(|e| bad(0, &e.to_string()))?;
    let mut offset = first.len();
    let columns = lines.next().ok_or_else(|| bad(offset, "missing column row"))?;
    if columns.trim_end() != "n,E,E_r" {
        return Err(bad(offset, "expected columns `n,E,E_r`"));
    }
    offset += columns.len();
    let (mut descending, mut ascending) = (Vec::new(), Vec::new());
    for line in lines {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let parsed = match fields.as_slice() {
            [n, e, er] => n
                .parse::<usize>()
                .ok()
                .filter(|&n| n == descending.len())
                .and(e.parse::<f64>().ok().zip(er.parse::<f64>().ok())),
            _ => None,
        };
        let (e, er) = parsed.ok_or_else(|| bad(offset, "malformed curve row"))?;
        descending.push(e);
        ascending.push(er);
        offset += line.len();
    }
    if descending.len() != header.units + 1 {
        return Err(bad(offset, &format!("{} rows for {} units", descending.len(), header.units)));
    }
    let curve = AblationCurve {
        class: header.class,
        layer: header.layer,
        units: header.units,
        samples: header.samples,
        mode: header.mode,
        baseline: header.baseline,
        descending,
        ascending,
    };
    Ok((header, curve))
}

/// Reads every `class_*.csv` in a directory, ordered by class.
pub fn read_curve_dir(dir: &Path) -> Result<Vec<(CurveHeader, AblationCurve)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("class_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no curve files in {}", dir.display())));
    }
    let mut curves = paths.iter().map(|p| read_curve(p)).collect::<Result<Vec<_>>>()?;
    curves.sort_by_key(|(h, _)| h.class);
    Ok(curves)
}
