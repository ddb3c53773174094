//! STLD dataset files: magic, u32 version, u32 count, u16 T,C,H,W, then per
//! sample T·C·H·W f32 frame values and one f32 label. Little-endian
//! throughout.

use std::fs;
use std::path::Path;

use super::{Dataset, FrameSegment, Sample};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"STLD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 * 2;

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let ds = Dataset::new(samples.to_vec())?;
    let shape = ds.shape();
    let mut dims = [0u16; 4];
    for (d, &s) in dims.iter_mut().zip(&shape) {
        *d = u16::try_from(s).map_err(|_| Error::Config(format!("extent {s} does not fit the u16 shape header")))?;
    }
    let count = u32::try_from(samples.len()).map_err(|_| Error::Config("too many samples for one file".into()))?;
    let per: usize = shape.iter().product();
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * 4 * (per + 1));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in samples {
        for v in s.segment.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.steering_deg.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(FormatError::Magic { expected: "STLD".into(), found: bytes[..bytes.len().min(4)].to_vec() }.into());
    }
    if bytes.len() < 8 {
        return Err(FormatError::Header("file ends inside the header".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(FormatError::Version { expected: DATASET_VERSION, found: version }.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Header("file ends inside the header".into()).into());
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        *s = u16::from_le_bytes(bytes[12 + 2 * i..14 + 2 * i].try_into().expect("2 bytes")) as usize;
    }
    if shape.contains(&0) {
        return Err(FormatError::ShapeHeader(format!("zero extent in (T,C,H,W) = {shape:?}")).into());
    }
    if count == 0 {
        return Err(FormatError::ShapeHeader("sample count is zero".into()).into());
    }
    let per: usize = shape.iter().product();
    let record = 4 * (per + 1);
    let body = &bytes[HEADER_LEN..];
    if body.len() < count * record {
        return Err(FormatError::Truncated { record: body.len() / record }.into());
    }
    if body.len() > count * record {
        return Err(FormatError::ShapeHeader(format!(
            "header promises {count} records of {record} bytes but {} bytes follow",
            body.len()
        ))
        .into());
    }
    let f32s = |chunk: &[u8]| -> Vec<f32> {
        chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
    };
    let samples = body
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let frames = Tensor::from_vec(&shape, f32s(&rec[..4 * per]))?;
            let label = f32::from_le_bytes(rec[4 * per..].try_into().expect("4 bytes"));
            Ok(Sample { segment: FrameSegment { frames, timestamp_index: i + shape[0] - 1 }, steering_deg: label })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// Writes `samples` atomically.
pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode_dataset(samples)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
