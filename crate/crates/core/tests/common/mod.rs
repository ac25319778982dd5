//! Test-only f64 reference implementation of the forward pass and loss,
//! written independently of the engine kernels. Used as the oracle for
//! finite-difference gradient checks and manual-ablation comparisons.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ablg_core::engine::{Layer, LayerSpec, Network, NetworkMeta};
use ablg_core::estimator::GapSample;
use ablg_core::{rng, Tensor};
use rand::Rng;

#[derive(Clone)]
pub struct RefNet {
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
    pub params: Vec<Vec<Vec<f64>>>,
}

/// Zeroes units `units` of the output of layer `site` (channel-major).
pub struct RefMask {
    pub site: usize,
    pub units: BTreeSet<usize>,
    pub unit_count: usize,
}

impl RefNet {
    pub fn from(net: &Network) -> Self {
        Self {
            input_shape: net.input_shape().to_vec(),
            specs: net.layers().iter().map(|l| l.spec.clone()).collect(),
            params: net
                .layers()
                .iter()
                .map(|l| l.params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect())
                .collect(),
        }
    }

    /// Logits of one sample. `dropout[i]` holds the multiplicative mask of
    /// layer `i` for this sample when training-mode dropout is simulated.
    pub fn forward(&self, x: &[f64], dropout: Option<&[Option<Vec<f64>>]>, mask: Option<&RefMask>) -> Vec<f64> {
        let mut shape = self.input_shape.clone();
        let mut v = x.to_vec();
        for (i, spec) in self.specs.iter().enumerate() {
            let p = &self.params[i];
            match *spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = (shape[1] as isize, shape[2] as isize);
                    let oh = ((h + 2 * padding as isize - kernel as isize) / stride as isize + 1) as usize;
                    let ow = ((w + 2 * padding as isize - kernel as isize) / stride as isize + 1) as usize;
                    let mut out = vec![0.0; out_channels * oh * ow];
                    for o in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = p[1][o];
                                for c in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = (oy * stride + ky) as isize - padding as isize;
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                                continue;
                                            }
                                            let wv = p[0][((o * in_channels + c) * kernel + ky) * kernel + kx];
                                            acc += wv * v[(c * h as usize + iy as usize) * w as usize + ix as usize];
                                        }
                                    }
                                }
                                out[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    v = out;
                    shape = vec![out_channels, oh, ow];
                }
                LayerSpec::Relu => v.iter_mut().for_each(|a| *a = a.max(0.0)),
                LayerSpec::MaxPool2d { kernel, stride } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    let mut out = Vec::with_capacity(c * oh * ow);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut m = f64::NEG_INFINITY;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        m = m.max(v[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                                    }
                                }
                                out.push(m);
                            }
                        }
                    }
                    v = out;
                    shape = vec![c, oh, ow];
                }
                LayerSpec::Flatten => shape = vec![v.len()],
                LayerSpec::Dense { in_features, out_features } => {
                    v = (0..out_features)
                        .map(|o| p[1][o] + (0..in_features).map(|f| p[0][o * in_features + f] * v[f]).sum::<f64>())
                        .collect();
                    shape = vec![out_features];
                }
                LayerSpec::Dropout { .. } => {
                    if let Some(Some(m)) = dropout.map(|d| &d[i]) {
                        v.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
                    }
                }
            }
            if let Some(mask) = mask {
                if mask.site == i {
                    let per = v.len() / mask.unit_count;
                    for &u in &mask.units {
                        v[u * per..(u + 1) * per].iter_mut().for_each(|a| *a = 0.0);
                    }
                }
            }
        }
        v
    }

    /// Mean cross-entropy over a batch of samples.
    pub fn loss(&self, xs: &[Vec<f64>], labels: &[usize], dropout: Option<&[Vec<Option<Vec<f64>>>]>) -> f64 {
        let mut total = 0.0;
        for (b, (x, &y)) in xs.iter().zip(labels).enumerate() {
            let z = self.forward(x, dropout.map(|d| d[b].as_slice()), None);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    }
}

pub fn samples_f64(batch: &Tensor) -> Vec<Vec<f64>> {
    (0..batch.batch())
        .map(|b| batch.item(b).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Relative error with a floor on the denominator for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// A network with every parameter drawn uniformly from [-scale, scale).
pub fn random_network<R: Rng>(rng: &mut R, input_shape: Vec<usize>, specs: Vec<LayerSpec>, scale: f32) -> Network {
    let layers = specs
        .into_iter()
        .map(|spec| {
            let params = spec.param_shapes().into_iter().map(|s| random_tensor(rng, s, scale)).collect();
            Layer::new(spec, params).unwrap()
        })
        .collect();
    Network::new(input_shape, layers, NetworkMeta::default()).unwrap()
}

pub fn conv(i: usize, o: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride,
        padding,
    }
}

pub fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense {
        in_features: i,
        out_features: o,
    }
}

/// The 16-unit, 3-layer toy CNN used by the oracle checks.
pub fn toy_cnn_specs(classes: usize) -> Vec<LayerSpec> {
    vec![
        conv(1, 8, 3, 1, 1),
        LayerSpec::Relu,
        conv(8, 16, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        dense(16 * 4 * 4, classes),
    ]
}

/// Largest relative error between the engine's parameter and input gradients
/// and central differences of the reference loss.
pub fn check_gradients(net: &Network, batch: &Tensor, labels: &[usize], seed: u64, use_dropout: bool) -> f64 {
    let reference = RefNet::from(net);
    let xs = samples_f64(batch);
    let (grads, dropout_masks) = if use_dropout {
        let grads = net.backward_train(batch, labels, &mut rng::stream(seed, "dropout", 0)).unwrap();
        // replay the engine's draw order: layer by layer, one uniform per activation
        let mut r = rng::stream(seed, "dropout", 0);
        let mut per_sample: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; net.layers().len()]; xs.len()];
        for (i, layer) in net.layers().iter().enumerate() {
            if let LayerSpec::Dropout { rate } = layer.spec {
                let width: usize = net.output_shape(i).iter().product();
                for sample in per_sample.iter_mut() {
                    let m: Vec<f64> = (0..width)
                        .map(|_| if r.gen::<f32>() < rate { 0.0 } else { (1.0 / (1.0 - rate)) as f64 })
                        .collect();
                    sample[i] = Some(m);
                }
            }
        }
        (grads, Some(per_sample))
    } else {
        (net.backward(batch, labels).unwrap(), None)
    };
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (li, layer_grads) in grads.params.iter().enumerate() {
        for (pi, g) in layer_grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut plus = reference.clone();
                plus.params[li][pi][k] += h;
                let mut minus = reference.clone();
                minus.params[li][pi][k] -= h;
                let fd = (plus.loss(&xs, labels, dropout_masks.as_deref()) - minus.loss(&xs, labels, dropout_masks.as_deref())) / (2.0 * h);
                worst = worst.max(rel_err(g.data()[k] as f64, fd));
            }
        }
    }
    for b in 0..xs.len() {
        for k in 0..xs[b].len() {
            let (mut plus, mut minus) = (xs.clone(), xs.clone());
            plus[b][k] += h;
            minus[b][k] -= h;
            let fd = (reference.loss(&plus, labels, dropout_masks.as_deref()) - reference.loss(&minus, labels, dropout_masks.as_deref()))
                / (2.0 * h);
            worst = worst.max(rel_err(grads.input.item(b)[k] as f64, fd));
        }
    }
    worst
}

/// Fraction of samples predicted as `class` with the first `n` ranked units
/// removed, recomputed from scratch by the f64 reference network.
pub fn naive_curve(net: &Network, batch: &Tensor, class: usize, layer: usize, ranking: &[usize]) -> Vec<f64> {
    let reference = RefNet::from(net);
    let xs = samples_f64(batch);
    let site = net.unit_site(layer).unwrap();
    (0..=ranking.len())
        .map(|n| {
            let mask = RefMask {
                site,
                units: ranking[..n].iter().copied().collect(),
                unit_count: ranking.len(),
            };
            let hits = xs
                .iter()
                .filter(|x| {
                    let logits = reference.forward(x, None, Some(&mask));
                    let best = (0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
                    best == class
                })
                .count();
            hits as f64 / xs.len() as f64
        })
        .collect()
}

/// Solves the 3x3 normal equations `X^T X beta = X^T y` by Cramer's rule.
pub fn normal_equations(samples: &[GapSample]) -> [f64; 3] {
    let mut xtx = [[0.0f64; 3]; 3];
    let mut xty = [0.0f64; 3];
    for s in samples {
        let row = [s.zeta, s.kappa, 1.0];
        for i in 0..3 {
            xty[i] += row[i] * s.gap;
            for j in 0..3 {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&xtx);
    let mut beta = [0.0; 3];
    for (k, b) in beta.iter_mut().enumerate() {
        let mut m = xtx;
        for i in 0..3 {
            m[i][k] = xty[i];
        }
        *b = det(&m) / d;
    }
    beta
}
