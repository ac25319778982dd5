use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerSpec, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A layer together with its parameters (`[weight, bias]` for conv and dense, none otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Tensor>) -> Result<Self> {
        let expected = spec.param_shapes();
        if expected.len() != params.len() || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::config(format!(
                "{} layer expects parameters {expected:?}, got {:?}",
                spec.name(),
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn unparameterised(spec: LayerSpec) -> Self {
        Self { spec, params: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub id: String,
    pub seed: u64,
    pub config_digest: String,
}

/// Ordered feed-forward network ending in a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    pub meta: NetworkMeta,
}

/// Set of disabled units at one conv or dense layer.
///
/// Units are zeroed after the layer's activation: when the layer is directly
/// followed by a ReLU the mask is applied to the ReLU output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnitMask {
    pub layer: usize,
    pub disabled: BTreeSet<usize>,
}

impl UnitMask {
    pub fn new(layer: usize, disabled: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layer,
            disabled: disabled.into_iter().collect(),
        }
    }

    pub fn empty(layer: usize) -> Self {
        Self::new(layer, [])
    }
}

/// Activations recorded at a layer's unit site, from which the rest of the
/// network can be re-run under different masks.
#[derive(Debug, Clone)]
pub struct Capture {
    layer: usize,
    site: usize,
    activations: Tensor,
}

impl Capture {
    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Post-activation output of the captured layer, unmasked.
    pub fn activations(&self) -> &Tensor {
        &self.activations
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as the network's parameters.
    pub params: Vec<Vec<Tensor>>,
    pub input: Tensor,
}

/// Per-layer inputs recorded by a forward pass, consumed by the backward pass.
pub(crate) struct Trace {
    inputs: Vec<Tensor>,
    dropout: Vec<Option<Vec<f32>>>,
    pub logits: Tensor,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, meta: NetworkMeta) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .spec
                .output_shape(&current)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            shapes.push(current.clone());
        }
        if current.len() != 1 || current[0] < 2 {
            return Err(Error::config(format!(
                "final layer must produce a logit vector over at least 2 classes, got {current:?}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            meta,
        })
    }

    /// Builds a network with He-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(input_shape: Vec<usize>, specs: Vec<LayerSpec>, rng: &mut R, meta: NetworkMeta) -> Result<Self> {
        let layers = specs
            .into_iter()
            .map(|spec| {
                let params = spec
                    .param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(k, shape)| {
                        let len: usize = shape.iter().product();
                        let data = if k == 0 {
                            let limit = (6.0 / spec.fan_in().unwrap_or(1) as f64).sqrt() as f32;
                            (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
                        } else {
                            vec![0.0; len]
                        };
                        Tensor::from_parts(shape, data)
                    })
                    .collect();
                Layer { spec, params }
            })
            .collect();
        Self::new(input_shape, layers, meta)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access. Parameter shapes are fixed at construction.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("validated network")[0]
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Indices of the conv and dense layers, the layers that own units.
    pub fn unit_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].spec.unit_count().is_some())
            .collect()
    }

    pub fn last_conv_layer(&self) -> Option<usize> {
        (0..self.layers.len())
            .rev()
            .find(|&i| matches!(self.layers[i].spec, LayerSpec::Conv2d { .. }))
    }

    /// Unit count of a conv or dense layer.
    pub fn unit_count(&self, layer: usize) -> Result<usize> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::bounds(format!("layer {layer} of {}", self.layers.len())))?
            .spec
            .unit_count()
            .ok_or_else(|| Error::config(format!("layer {layer} ({}) has no units", self.layers[layer].spec.name())))
    }

    /// Index of the layer whose output carries the post-activation units of `layer`.
    pub fn unit_site(&self, layer: usize) -> Result<usize> {
        self.unit_count(layer)?;
        Ok(match self.layers.get(layer + 1) {
            Some(Layer { spec: LayerSpec::Relu, .. }) => layer + 1,
            _ => layer,
        })
    }

    fn check_mask(&self, mask: &UnitMask) -> Result<usize> {
        let m = self.unit_count(mask.layer)?;
        if let Some(&u) = mask.disabled.iter().next_back() {
            if u >= m {
                return Err(Error::bounds(format!("unit {u} at layer {} with {m} units", mask.layer)));
            }
        }
        self.unit_site(mask.layer)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::config(format!(
                "batch shape {:?} does not match network input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    /// Applies layer `i` in inference mode.
    fn apply(&self, i: usize, input: &Tensor) -> Tensor {
        let batch = input.batch();
        let layer = &self.layers[i];
        let in_shape = self.layer_input_shape(i);
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&self.shapes[i]);
        let data = match layer.spec {
            LayerSpec::Conv2d {
                kernel, stride, padding, ..
            } => layer::conv2d_forward(
                input.data(),
                batch,
                Window::new(in_shape, kernel, stride, padding),
                layer.params[0].data(),
                layer.params[1].data(),
            ),
            LayerSpec::Dense { in_features, .. } => {
                layer::dense_forward(input.data(), batch, in_features, layer.params[0].data(), layer.params[1].data())
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                layer::maxpool_forward(input.data(), batch, Window::new(in_shape, kernel, stride, 0))
            }
            LayerSpec::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Flatten | LayerSpec::Dropout { .. } => input.data().to_vec(),
        };
        Tensor::from_parts(out_shape, data)
    }

    fn zero_units(&self, t: &mut Tensor, mask: &UnitMask) {
        let m = self.layers[mask.layer].spec.unit_count().expect("checked mask");
        let per_unit = t.item_len() / m;
        let item = t.item_len();
        let data = t.data_mut();
        for b in 0..data.len() / item {
            for &u in &mask.disabled {
                data[b * item + u * per_unit..b * item + (u + 1) * per_unit].fill(0.0);
            }
        }
    }

    fn run_from(&self, start: usize, mut x: Tensor, mask: Option<(&UnitMask, usize)>) -> Tensor {
        for i in start..self.layers.len() {
            x = self.apply(i, &x);
            if let Some((mask, site)) = mask {
                if site == i {
                    self.zero_units(&mut x, mask);
                }
            }
        }
        x
    }

    /// Inference forward pass returning logits `[batch, N]`. Dropout is disabled.
    pub fn forward(&self, batch: &Tensor, mask: Option<&UnitMask>) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mask = match mask {
            Some(m) => Some((m, self.check_mask(m)?)),
            None => None,
        };
        Ok(self.run_from(0, batch.clone(), mask))
    }

    /// Post-activation output of `layer` with `mask` applied.
    pub fn unit_activations(&self, batch: &Tensor, layer: usize, mask: Option<&UnitMask>) -> Result<Tensor> {
        let mut capture = self.forward_capture(batch, layer)?;
        if let Some(mask) = mask {
            if mask.layer != layer {
                return Err(Error::config(format!("mask targets layer {}, not {layer}", mask.layer)));
            }
            self.check_mask(mask)?;
            self.zero_units(&mut capture.activations, mask);
        }
        Ok(capture.activations)
    }

    /// Runs the network up to the unit site of `layer` and keeps the activations.
    pub fn forward_capture(&self, batch: &Tensor, layer: usize) -> Result<Capture> {
        self.check_batch(batch)?;
        let site = self.unit_site(layer)?;
        let mut x = batch.clone();
        for i in 0..=site {
            x = self.apply(i, &x);
        }
        Ok(Capture {
            layer,
            site,
            activations: x,
        })
    }

    /// Finishes a captured forward pass under `mask`, which must target the captured layer.
    pub fn resume(&self, capture: &Capture, mask: Option<&UnitMask>) -> Result<Tensor> {
        let mut x = capture.activations.clone();
        if let Some(mask) = mask {
            if mask.layer != capture.layer {
                return Err(Error::config(format!(
                    "mask targets layer {} but capture was taken at layer {}",
                    mask.layer, capture.layer
                )));
            }
            self.check_mask(mask)?;
            self.zero_units(&mut x, mask);
        }
        Ok(self.run_from(capture.site + 1, x, None))
    }

    /// Forward pass that records layer inputs. With `dropout` set, dropout
    /// layers sample inverted-dropout masks from it.
    pub(crate) fn trace<R: Rng + ?Sized>(&self, batch: &Tensor, mut dropout: Option<&mut R>) -> Result<Trace> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = self.apply(i, &x);
            let mut drop_mask = None;
            if let (LayerSpec::Dropout { rate }, Some(rng)) = (&layer.spec, dropout.as_deref_mut()) {
                if *rate > 0.0 {
                    let keep = 1.0 / (1.0 - rate);
                    let m: Vec<f32> = (0..out.len()).map(|_| if rng.gen::<f32>() < *rate { 0.0 } else { keep }).collect();
                    for (v, &k) in out.data_mut().iter_mut().zip(&m) {
                        *v *= k;
                    }
                    drop_mask = Some(m);
                }
            }
            inputs.push(std::mem::replace(&mut x, out));
            masks.push(drop_mask);
        }
        Ok(Trace {
            inputs,
            dropout: masks,
            logits: x,
        })
    }

    /// Back-propagates a cotangent on the logits through a recorded trace.
    pub(crate) fn backprop(&self, trace: &Trace, dlogits: &Tensor) -> Gradients {
        let batch = dlogits.batch();
        let mut params: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut grad = dlogits.data().to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            let in_shape = self.layer_input_shape(i);
            grad = match layer.spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let g = layer::conv2d_backward(
                        input.data(),
                        batch,
                        Window::new(in_shape, kernel, stride, padding),
                        layer.params[0].data(),
                        out_channels,
                        &grad,
                    );
                    params[i] = vec![
                        Tensor::from_parts(layer.params[0].shape().to_vec(), g.weight),
                        Tensor::from_parts(layer.params[1].shape().to_vec(), g.bias),
                    ];
                    g.input
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let g = layer::dense_backward(input.data(), batch, in_features, layer.params[0].data(), out_features, &grad);
                    params[i] = vec![
                        Tensor::from_parts(layer.params[0].shape().to_vec(), g.weight),
                        Tensor::from_parts(layer.params[1].shape().to_vec(), g.bias),
                    ];
                    g.input
                }
                LayerSpec::MaxPool2d { kernel, stride } => {
                    layer::maxpool_backward(input.data(), batch, Window::new(in_shape, kernel, stride, 0), &grad)
                }
                LayerSpec::Relu => grad
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
                LayerSpec::Flatten => grad,
                LayerSpec::Dropout { .. } => match &trace.dropout[i] {
                    Some(m) => grad.iter().zip(m).map(|(&g, &k)| g * k).collect(),
                    None => grad,
                },
            };
        }
        Gradients {
            loss: 0.0,
            params,
            input: Tensor::from_parts(trace.inputs[0].shape().to_vec(), grad),
        }
    }

    /// Gradients of the mean softmax cross-entropy over the batch, dropout disabled.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
        self.backward_scaled(batch, labels, 1.0)
    }

    /// As [`Network::backward`] with the loss multiplied by `loss_scale`.
    pub fn backward_scaled(&self, batch: &Tensor, labels: &[usize], loss_scale: f64) -> Result<Gradients> {
        self.loss_gradients(batch, labels, loss_scale, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Training-mode gradients: dropout layers draw their masks from `rng`,
    /// layer by layer, one uniform draw per activation.
    pub fn backward_train<R: Rng + ?Sized>(&self, batch: &Tensor, labels: &[usize], rng: &mut R) -> Result<Gradients> {
        self.loss_gradients(batch, labels, 1.0, Some(rng))
    }

    pub(crate) fn loss_gradients<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        labels: &[usize],
        loss_scale: f64,
        dropout: Option<&mut R>,
    ) -> Result<Gradients> {
        self.check_batch(batch)?;
        let n = self.num_classes();
        if labels.len() != batch.batch() {
            return Err(Error::config(format!("{} labels for a batch of {}", labels.len(), batch.batch())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::domain(format!("label {bad} outside [0, {n})")));
        }
        let trace = self.trace(batch, dropout)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels, loss_scale);
        let mut grads = self.backprop(&trace, &dlogits);
        grads.loss = loss;
        Ok(grads)
    }

    /// Vector-Jacobian product of the inference forward pass: gradients of
    /// `sum(cotangent * logits)` with respect to parameters and input.
    pub fn vjp(&self, batch: &Tensor, cotangent: &Tensor) -> Result<Gradients> {
        let trace = self.trace(batch, None::<&mut rand_chacha::ChaCha8Rng>)?;
        if cotangent.shape() != trace.logits.shape() {
            return Err(Error::config(format!(
                "cotangent shape {:?} does not match logits {:?}",
                cotangent.shape(),
                trace.logits.shape()
            )));
        }
        let loss = cotangent
            .data()
            .iter()
            .zip(trace.logits.data())
            .map(|(&c, &z)| c as f64 * z as f64)
            .sum();
        let mut grads = self.backprop(&trace, cotangent);
        grads.loss = loss;
        Ok(grads)
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], scale: f64) -> (f64, Tensor) {
    let batch = logits.batch();
    let n = logits.item_len();
    let mut grad = Vec::with_capacity(batch * n);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.item(b);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - row[label] as f64;
        for (k, e) in exps.iter().enumerate() {
            let p = e / total - if k == label { 1.0 } else { 0.0 };
            grad.push((p * scale / batch as f64) as f32);
        }
    }
    (loss * scale / batch as f64, Tensor::from_parts(logits.shape().to_vec(), grad))
}
