//! Binary dataset format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic         4 bytes  "ABLD"
//! version       u16      = 1
//! num_classes   u16
//! sample_rank   u8
//! sample_dims   u32 * sample_rank
//! count         u32      number of samples
//! payload       u8       0 = u8 samples (value / 255), 1 = f32 samples
//! split         u8       0 = train, 1 = test
//! samples       count * product(sample_dims) values of the payload type
//! original      u16 * count   original labels
//! labels        u16 * count   labels in force (possibly corrupted)
//! ```

use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{LabeledDataset, Split};
use crate::engine::weights::ByteReader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ABLD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    /// Quantised to `round(clamp(v, 0, 1) * 255)`; lossy.
    U8,
    F32,
}

pub fn encode(ds: &LabeledDataset, payload: Payload) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u16::<LittleEndian>(ds.num_classes() as u16).unwrap();
    out.push(ds.sample_shape().len() as u8);
    for &d in ds.sample_shape() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    out.write_u32::<LittleEndian>(ds.len() as u32).unwrap();
    out.push(match payload {
        Payload::U8 => 0,
        Payload::F32 => 1,
    });
    out.push(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    for &v in ds.features() {
        match payload {
            Payload::U8 => out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
            Payload::F32 => out.write_f32::<LittleEndian>(v).unwrap(),
        }
    }
    for &l in ds.original_labels().iter().chain(ds.labels()) {
        out.write_u16::<LittleEndian>(l as u16).unwrap();
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ABLD\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let num_classes = r.u16("class count")? as usize;
    let rank = r.u8("sample rank")? as usize;
    let shape = (0..rank)
        .map(|_| r.u32("sample dim").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u32("sample count")? as usize;
    let at = r.offset();
    let payload = match r.u8("payload kind")? {
        0 => Payload::U8,
        1 => Payload::F32,
        other => return Err(Error::format(at, format!("unknown payload kind {other}"))),
    };
    let at = r.offset();
    let split = match r.u8("split tag")? {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(Error::format(at, format!("unknown split tag {other}"))),
    };
    let values = count
        .checked_mul(shape.iter().product())
        .ok_or_else(|| Error::format(r.offset(), "sample count overflow"))?;
    let features = match payload {
        Payload::U8 => r.take(values, "samples")?.iter().map(|&b| b as f32 / 255.0).collect(),
        Payload::F32 => r.f32s(values, "samples")?,
    };
    let mut read_labels = |what: &str| -> Result<Vec<usize>> { (0..count).map(|_| r.u16(what).map(|l| l as usize)).collect() };
    let original = read_labels("original labels")?;
    let labels = read_labels("labels")?;
    let end = r.offset();
    r.finish()?;
    LabeledDataset::with_original(num_classes, shape, features, labels, original, split).map_err(|e| Error::format(end, e.to_string()))
}

pub fn save(ds: &LabeledDataset, path: &Path, payload: Payload) -> Result<()> {
    std::fs::write(path, encode(ds, payload))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LabeledDataset> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledDataset {
        LabeledDataset::with_original(
            3,
            vec![1, 2, 2],
            (0..12).map(|v| v as f32 * 0.1 - 0.3).collect(),
            vec![0, 2, 1],
            vec![0, 1, 1],
            Split::Test,
        )
        .unwrap()
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let ds = sample();
        let bytes = encode(&ds, Payload::F32);
        assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn u8_payload_quantises() {
        let ds = sample();
        let back = decode(&encode(&ds, Payload::U8)).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.features().iter().zip(ds.features()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(&sample(), Payload::F32);
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 4),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(decode(b"ABLX"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_label_rejected() {
        let mut bytes = encode(&sample(), Payload::F32);
        let n = bytes.len();
        bytes[n - 2] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
