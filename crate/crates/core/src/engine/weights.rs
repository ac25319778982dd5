//! Portable weight format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "ABLG"
//! version      u16      = 1
//! layer_count  u16
//! input_rank   u8
//! input_dims   u32 * input_rank
//! layer_count times:
//!   tag        u8       1 conv2d, 2 relu, 3 maxpool2d, 4 flatten, 5 dense, 6 dropout
//!   hyperparameters (by tag)
//!     conv2d     u32 in_channels, u32 out_channels, u32 kernel, u32 stride, u32 padding
//!     maxpool2d  u32 kernel, u32 stride
//!     dense      u32 in_features, u32 out_features
//!     dropout    f32 rate
//!     relu, flatten: empty
//!   parameter tensors (conv2d and dense: weight then bias)
//!     rank u8, dims u32 * rank, f32 * product(dims)
//! ```
//!
//! Metadata lives in a JSON sidecar next to the weight file (`model.ablg` ->
//! `model.json`).

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Layer, LayerSpec, Network, NetworkMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABLG";
pub const VERSION: u16 = 1;

const TAG_CONV2D: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL2D: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;
const TAG_DROPOUT: u8 = 6;

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub meta: NetworkMeta,
    pub tool_version: String,
    pub layers: Vec<LayerSpec>,
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u16::<LittleEndian>(net.layers().len() as u16).unwrap();
    out.push(net.input_shape().len() as u8);
    for &d in net.input_shape() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for layer in net.layers() {
        match layer.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push(TAG_CONV2D);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    out.write_u32::<LittleEndian>(v as u32).unwrap();
                }
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::MaxPool2d { kernel, stride } => {
                out.push(TAG_MAXPOOL2D);
                out.write_u32::<LittleEndian>(kernel as u32).unwrap();
                out.write_u32::<LittleEndian>(stride as u32).unwrap();
            }
            LayerSpec::Flatten => out.push(TAG_FLATTEN),
            LayerSpec::Dense { in_features, out_features } => {
                out.push(TAG_DENSE);
                out.write_u32::<LittleEndian>(in_features as u32).unwrap();
                out.write_u32::<LittleEndian>(out_features as u32).unwrap();
            }
            LayerSpec::Dropout { rate } => {
                out.push(TAG_DROPOUT);
                out.write_f32::<LittleEndian>(rate).unwrap();
            }
        }
        for t in &layer.params {
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
    }
    out
}

/// Bounds-checked little-endian reader that reports the failing byte offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4, what)?))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "length overflow"))?,
            what,
        )?;
        let mut out = vec![0.0; n];
        LittleEndian::read_f32_into(bytes, &mut out);
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8], meta: NetworkMeta) -> Result<Network> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ABLG\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u16("layer count")? as usize;
    let rank = r.u8("input rank")? as usize;
    let input_shape = (0..rank)
        .map(|_| r.u32("input dim").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.offset();
        let tag = r.u8("layer tag")?;
        let mut dim = |name: &str| r.u32(name).map(|v| v as usize);
        let spec = match tag {
            TAG_CONV2D => LayerSpec::Conv2d {
                in_channels: dim("conv in_channels")?,
                out_channels: dim("conv out_channels")?,
                kernel: dim("conv kernel")?,
                stride: dim("conv stride")?,
                padding: dim("conv padding")?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_MAXPOOL2D => LayerSpec::MaxPool2d {
                kernel: dim("pool kernel")?,
                stride: dim("pool stride")?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DENSE => LayerSpec::Dense {
                in_features: dim("dense in_features")?,
                out_features: dim("dense out_features")?,
            },
            TAG_DROPOUT => LayerSpec::Dropout {
                rate: r.f32("dropout rate")?,
            },
            other => return Err(Error::format(at, format!("layer {i}: unknown kind tag {other}"))),
        };
        let mut params = Vec::new();
        for expected in spec.param_shapes() {
            let at = r.offset();
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != expected {
                return Err(Error::format(
                    at,
                    format!("layer {i} ({}): tensor shape {shape:?}, expected {expected:?}", spec.name()),
                ));
            }
            let data = r.f32s(shape.iter().product(), "tensor payload")?;
            params.push(Tensor::from_parts(shape, data));
        }
        layers.push(Layer::new(spec, params)?);
    }
    r.finish()?;
    Network::new(input_shape, layers, meta).map_err(|e| Error::format(r.offset(), e.to_string()))
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Writes `path` and its JSON sidecar.
pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    let sidecar = Sidecar {
        meta: net.meta.clone(),
        tool_version: crate::TOOL_VERSION.to_string(),
        layers: net.layers().iter().map(|l| l.spec.clone()).collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a weight file; metadata comes from the sidecar when present.
pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        serde_json::from_str::<Sidecar>(&std::fs::read_to_string(&sidecar)?)?.meta
    } else {
        NetworkMeta {
            id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            ..Default::default()
        }
    };
    decode(&bytes, meta)
}
