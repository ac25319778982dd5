use std::path::PathBuf;

use ablg_core::ablation::{self, EvalMode};
use ablg_core::data::{self, format as dsformat, SyntheticSpec};
use ablg_core::engine::{weights, UnitMask};
use ablg_core::estimator::{self, GapSample};
use ablg_core::harness::{self, ExperimentConfig, LayerSelector};
use ablg_core::trainer::{self, TrainConfig};
use ablg_core::{margin, sparsity, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Training { .. } | Error::SingularFit { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Converts a serialisable value into plain Python objects via JSON.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Network", module = "ablg")]
struct PyNetwork {
    inner: ablg_core::engine::Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: weights::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        weights::save(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.meta.id.clone()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Indices of layers whose units can be ablated.
    fn unit_layers(&self) -> Vec<usize> {
        self.inner.unit_layers()
    }

    fn last_conv_layer(&self) -> Option<usize> {
        self.inner.last_conv_layer()
    }

    /// Logits for a list of flattened samples, optionally with units of
    /// `mask_layer` disabled.
    #[pyo3(signature = (samples, mask_layer=None, disabled=Vec::new()))]
    fn forward(&self, samples: Vec<Vec<f32>>, mask_layer: Option<usize>, disabled: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(self.inner.input_shape());
        let batch = Tensor::new(shape, samples.concat()).map_err(err)?;
        let mask = mask_layer.map(|l| UnitMask::new(l, disabled));
        let logits = self.inner.forward(&batch, mask.as_ref()).map_err(err)?;
        Ok((0..logits.batch()).map(|b| logits.item(b).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Network(id={:?}, layers={})", self.inner.meta.id, self.inner.layers().len())
    }
}

#[pyclass(name = "Dataset", module = "ablg")]
struct PyDataset {
    inner: data::LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dsformat::load(&path).map_err(err)?,
        })
    }

    /// Train and test splits of the synthetic stroke dataset; `spec` is a
    /// JSON object of generator settings.
    #[staticmethod]
    #[pyo3(signature = (spec="{}"))]
    fn synthetic(spec: &str) -> PyResult<(Self, Self)> {
        let spec: SyntheticSpec = from_json(spec)?;
        let (train, test) = spec.generate().map_err(err)?;
        Ok((Self { inner: train }, Self { inner: test }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dsformat::save(&self.inner, &path, dsformat::Payload::F32).map_err(err)
    }

    fn corrupt(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::corrupt_labels(&self.inner, fraction, seed).map_err(err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn original_labels(&self) -> Vec<usize> {
        self.inner.original_labels().to_vec()
    }

    fn sample(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("sample {index} out of range")));
        }
        Ok(self.inner.sample(index).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Trains one network; `config` is a JSON training configuration. Returns the
/// network, its zoo entry and the (possibly corrupted) training set.
#[pyfunction]
#[pyo3(signature = (train, test, config="{}"))]
fn train<'py>(py: Python<'py>, train: &PyDataset, test: &PyDataset, config: &str) -> PyResult<(PyNetwork, Bound<'py, PyAny>, PyDataset)> {
    let mut value: serde_json::Value = from_json(config)?;
    let defaults = serde_json::to_value(TrainConfig::default()).expect("serialisable");
    if let (Some(v), serde_json::Value::Object(d)) = (value.as_object_mut(), defaults) {
        for (k, dv) in d {
            v.entry(k).or_insert(dv);
        }
    }
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let t = py.detach(|| trainer::train(&train.inner, &test.inner, &config)).map_err(err)?;
    Ok((
        PyNetwork { inner: t.network },
        to_py(py, &t.entry)?,
        PyDataset { inner: t.train_set },
    ))
}

/// Both ablation curves of one class as a dict.
#[pyfunction]
#[pyo3(signature = (net, data, class_index, layer=None, whole_dataset=false))]
fn sweep_class<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    data: &PyDataset,
    class_index: usize,
    layer: Option<usize>,
    whole_dataset: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let selector = layer.map_or_else(LayerSelector::default, LayerSelector::Index);
    let layer = selector.resolve(&net.inner).map_err(err)?;
    let mode = if whole_dataset {
        EvalMode::WholeDataset
    } else {
        EvalMode::PerClass
    };
    let curve = py
        .detach(|| ablation::sweep_class(&net.inner, &data.inner, class_index, layer, mode))
        .map_err(err)?;
    to_py(py, &curve)
}

/// Per-class and fused ζ and κ for every class of `data`.
#[pyfunction]
#[pyo3(signature = (net, data, layer=None, normalize=false))]
fn quantify<'py>(py: Python<'py>, net: &PyNetwork, data: &PyDataset, layer: Option<usize>, normalize: bool) -> PyResult<Bound<'py, PyAny>> {
    let selector = layer.map_or_else(LayerSelector::default, LayerSelector::Index);
    let layer = selector.resolve(&net.inner).map_err(err)?;
    let chance = 1.0 / data.inner.num_classes() as f64;
    let q = py
        .detach(|| {
            let curves = ablation::sweep_all(&net.inner, &data.inner, layer, EvalMode::PerClass)?;
            sparsity::quantify(&net.inner.meta.id, &curves, chance, normalize)
        })
        .map_err(err)?;
    to_py(py, &q)
}

/// `(n0, n0_r, never_reaches_chance)` of a curve pair.
#[pyfunction]
fn turning_points(descending: Vec<f64>, ascending: Vec<f64>, chance: f64) -> (usize, usize, bool) {
    let tp = sparsity::turning_points(&descending, &ascending, chance);
    (tp.n0, tp.n0_r, tp.degenerate)
}

#[pyfunction]
fn zeta(n0: usize, n0_r: usize, units: usize) -> PyResult<f64> {
    sparsity::zeta(n0, n0_r, units).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (descending, ascending, units, normalize_by=None))]
fn kappa(descending: Vec<f64>, ascending: Vec<f64>, units: usize, normalize_by: Option<f64>) -> PyResult<f64> {
    sparsity::kappa(&descending, &ascending, units, normalize_by).map_err(err)
}

/// Least-squares `(a, b, c)` of `gap = a*zeta + b*kappa + c`.
#[pyfunction]
fn fit(zetas: Vec<f64>, kappas: Vec<f64>, gaps: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if zetas.len() != kappas.len() || zetas.len() != gaps.len() {
        return Err(PyValueError::new_err("zetas, kappas and gaps differ in length"));
    }
    let samples: Vec<GapSample> = zetas
        .iter()
        .zip(&kappas)
        .zip(&gaps)
        .enumerate()
        .map(|(i, ((&zeta, &kappa), &gap))| GapSample {
            network_id: i.to_string(),
            zeta,
            kappa,
            gap,
        })
        .collect();
    let m = estimator::fit(&samples).map_err(err)?;
    Ok((m.a, m.b, m.c))
}

#[pyfunction]
fn predict(coefficients: (f64, f64, f64), zeta: f64, kappa: f64) -> f64 {
    let (a, b, c) = coefficients;
    a * zeta + b * kappa + c
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    estimator::pearson(&x, &y).map_err(err)
}

#[pyfunction]
fn ssr(predictions: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    estimator::ssr(&predictions, &truths).map_err(err)
}

/// Margin distances and quantile features of `net` over `data`.
#[pyfunction]
fn margin_distribution<'py>(py: Python<'py>, net: &PyNetwork, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let dist = py.detach(|| margin::margin_distribution(&net.inner, &data.inner)).map_err(err)?;
    to_py(py, &dist)
}

/// Runs a full experiment from a JSON configuration and returns its summary.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let config: ExperimentConfig = from_json(config)?;
    let report = py.detach(|| harness::run_experiment(&config)).map_err(err)?;
    to_py(py, &report.summary)
}

#[pymodule]
fn ablg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_class, m)?)?;
    m.add_function(wrap_pyfunction!(quantify, m)?)?;
    m.add_function(wrap_pyfunction!(turning_points, m)?)?;
    m.add_function(wrap_pyfunction!(zeta, m)?)?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(ssr, m)?)?;
    m.add_function(wrap_pyfunction!(margin_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
