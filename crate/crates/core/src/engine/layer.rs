use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network. Shapes below exclude the batch dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Input `[C, H, W]`, output `[out_channels, H', W']`. Weight `[O, C, K, K]`, bias `[O]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Input `[F]`, output `[out_features]`. Weight `[O, F]`, bias `[O]`.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Inverted dropout; identity outside training.
    Dropout {
        rate: f32,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    /// Number of ablatable units, for conv (channels) and dense (neurons) layers.
    pub fn unit_count(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            LayerSpec::Dense { out_features, .. } => Some(out_features),
            _ => None,
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::Dense { in_features, out_features } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// Fan-in used for weight initialisation.
    pub(crate) fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { in_channels, kernel, .. } => Some(in_channels * kernel * kernel),
            LayerSpec::Dense { in_features, .. } => Some(in_features),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Error::config(format!("{} layer on input {input:?}: {why}", self.name()));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(bad("channels, kernel and stride must be positive".into()));
                }
                let &[c, h, w] = input else {
                    return Err(bad("expected a [C, H, W] input".into()));
                };
                if c != in_channels {
                    return Err(bad(format!("expected {in_channels} channels")));
                }
                let oh = conv_extent(h, kernel, stride, padding).ok_or_else(|| bad("kernel larger than padded input".into()))?;
                let ow = conv_extent(w, kernel, stride, padding).ok_or_else(|| bad("kernel larger than padded input".into()))?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(bad("kernel and stride must be positive".into()));
                }
                let &[c, h, w] = input else {
                    return Err(bad("expected a [C, H, W] input".into()));
                };
                let oh = conv_extent(h, kernel, stride, 0).ok_or_else(|| bad("window larger than input".into()))?;
                let ow = conv_extent(w, kernel, stride, 0).ok_or_else(|| bad("window larger than input".into()))?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err(bad("feature counts must be positive".into()));
                }
                if input != [in_features] {
                    return Err(bad(format!("expected a flat [{in_features}] input")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn conv_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Geometry of a 2-d window operation on one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Window {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: usize) -> Self {
        let (channels, height, width) = (input[0], input[1], input[2]);
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source offset inside the `[C, H, W]` sample for patch row `k` at output position `p`.
    #[inline]
    fn source(&self, k: usize, p: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let (c, rem) = (k / kk, k % kk);
        let (ky, kx) = (rem / self.kernel, rem % self.kernel);
        let (oy, ox) = (p / self.out_width, p % self.out_width);
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then(|| (c * self.height + iy) * self.width + ix)
    }

    fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let positions = self.positions();
        for k in 0..self.patch_len() {
            let row = &mut cols[k * positions..(k + 1) * positions];
            for (p, slot) in row.iter_mut().enumerate() {
                *slot = self.source(k, p).map_or(0.0, |i| sample[i]);
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &[f32], batch: usize, win: Window, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let in_len = win.channels * win.height * win.width;
    let patch = win.patch_len();
    let positions = win.positions();
    let out_channels = bias.len();
    let mut out = vec![0.0f32; batch * out_channels * positions];
    let mut cols = vec![0.0f32; patch * positions];
    let mut acc = vec![0.0f64; positions];
    for b in 0..batch {
        win.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        for o in 0..out_channels {
            acc.fill(bias[o] as f64);
            let wrow = &weight[o * patch..(o + 1) * patch];
            for (k, &w) in wrow.iter().enumerate() {
                let w = w as f64;
                let col = &cols[k * positions..(k + 1) * positions];
                for (a, &x) in acc.iter_mut().zip(col) {
                    *a += w * x as f64;
                }
            }
            let dst = &mut out[(b * out_channels + o) * positions..(b * out_channels + o + 1) * positions];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    out
}

pub(crate) struct ParamGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(input: &[f32], batch: usize, win: Window, weight: &[f32], out_channels: usize, dout: &[f32]) -> ParamGrads {
    let in_len = win.channels * win.height * win.width;
    let patch = win.patch_len();
    let positions = win.positions();
    let mut dw = vec![0.0f64; out_channels * patch];
    let mut db = vec![0.0f64; out_channels];
    let mut dinput = vec![0.0f32; batch * in_len];
    let mut cols = vec![0.0f32; patch * positions];
    let mut dcol = vec![0.0f64; positions];
    let mut dsample = vec![0.0f64; in_len];
    for b in 0..batch {
        win.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        let dslab = &dout[b * out_channels * positions..(b + 1) * out_channels * positions];
        for o in 0..out_channels {
            let drow = &dslab[o * positions..(o + 1) * positions];
            db[o] += drow.iter().map(|&g| g as f64).sum::<f64>();
            for k in 0..patch {
                let col = &cols[k * positions..(k + 1) * positions];
                dw[o * patch + k] += col.iter().zip(drow).map(|(&x, &g)| x as f64 * g as f64).sum::<f64>();
            }
        }
        dsample.fill(0.0);
        for k in 0..patch {
            dcol.fill(0.0);
            for o in 0..out_channels {
                let w = weight[o * patch + k] as f64;
                let drow = &dslab[o * positions..(o + 1) * positions];
                for (d, &g) in dcol.iter_mut().zip(drow) {
                    *d += w * g as f64;
                }
            }
            for (p, &d) in dcol.iter().enumerate() {
                if let Some(i) = win.source(k, p) {
                    dsample[i] += d;
                }
            }
        }
        for (dst, &v) in dinput[b * in_len..(b + 1) * in_len].iter_mut().zip(&dsample) {
            *dst = v as f32;
        }
    }
    ParamGrads {
        input: dinput,
        weight: dw.into_iter().map(|v| v as f32).collect(),
        bias: db.into_iter().map(|v| v as f32).collect(),
    }
}

pub(crate) fn dense_forward(input: &[f32], batch: usize, in_features: usize, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let out_features = bias.len();
    let mut out = Vec::with_capacity(batch * out_features);
    for b in 0..batch {
        let x = &input[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let dot: f64 = w.iter().zip(x).map(|(&w, &x)| w as f64 * x as f64).sum();
            out.push((bias[o] as f64 + dot) as f32);
        }
    }
    out
}

pub(crate) fn dense_backward(
    input: &[f32],
    batch: usize,
    in_features: usize,
    weight: &[f32],
    out_features: usize,
    dout: &[f32],
) -> ParamGrads {
    let mut dw = vec![0.0f64; out_features * in_features];
    let mut db = vec![0.0f64; out_features];
    let mut dinput = vec![0.0f32; batch * in_features];
    let mut dx = vec![0.0f64; in_features];
    for b in 0..batch {
        let x = &input[b * in_features..(b + 1) * in_features];
        let g = &dout[b * out_features..(b + 1) * out_features];
        dx.fill(0.0);
        for o in 0..out_features {
            let go = g[o] as f64;
            db[o] += go;
            let wrow = &weight[o * in_features..(o + 1) * in_features];
            let dwrow = &mut dw[o * in_features..(o + 1) * in_features];
            for f in 0..in_features {
                dwrow[f] += go * x[f] as f64;
                dx[f] += go * wrow[f] as f64;
            }
        }
        for (dst, &v) in dinput[b * in_features..(b + 1) * in_features].iter_mut().zip(&dx) {
            *dst = v as f32;
        }
    }
    ParamGrads {
        input: dinput,
        weight: dw.into_iter().map(|v| v as f32).collect(),
        bias: db.into_iter().map(|v| v as f32).collect(),
    }
}

pub(crate) fn maxpool_forward(input: &[f32], batch: usize, win: Window) -> Vec<f32> {
    let mut out = Vec::with_capacity(batch * win.channels * win.out_height * win.out_width);
    for b in 0..batch {
        for c in 0..win.channels {
            let plane = &input[((b * win.channels + c) * win.height) * win.width..][..win.height * win.width];
            for oy in 0..win.out_height {
                for ox in 0..win.out_width {
                    out.push(plane[pool_argmax(plane, win, oy, ox)]);
                }
            }
        }
    }
    out
}

pub(crate) fn maxpool_backward(input: &[f32], batch: usize, win: Window, dout: &[f32]) -> Vec<f32> {
    let plane_len = win.height * win.width;
    let mut dinput = vec![0.0f32; input.len()];
    let mut g = dout.iter();
    for b in 0..batch {
        for c in 0..win.channels {
            let base = (b * win.channels + c) * plane_len;
            let plane = &input[base..base + plane_len];
            for oy in 0..win.out_height {
                for ox in 0..win.out_width {
                    let i = pool_argmax(plane, win, oy, ox);
                    dinput[base + i] += *g.next().expect("dout sized to pool output");
                }
            }
        }
    }
    dinput
}

/// First maximum in the pooling window, scanning row-major.
#[inline]
fn pool_argmax(plane: &[f32], win: Window, oy: usize, ox: usize) -> usize {
    let mut best = (oy * win.stride) * win.width + ox * win.stride;
    for ky in 0..win.kernel {
        for kx in 0..win.kernel {
            let i = (oy * win.stride + ky) * win.width + ox * win.stride + kx;
            if plane[i] > plane[best] {
                best = i;
            }
        }
    }
    best
}
