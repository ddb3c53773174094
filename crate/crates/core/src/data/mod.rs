//! Frame segmentation, the synthetic lane world and STLD dataset files.

mod lane;
mod stld;

pub use lane::{generate_lane_dataset, generate_lane_dataset_strided, CurvatureMode, LaneWorld, KAPPA_MAX, STEERING_GAIN};
pub use stld::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames per segment.
pub const SEGMENT_LEN: usize = 3;

/// A (T,C,H,W) clip of consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSegment {
    pub frames: Tensor<f32>,
    /// Index of the last frame in the source stream.
    pub timestamp_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub segment: FrameSegment,
    /// Degrees, positive = left.
    pub steering_deg: f32,
}

/// Maps 8-bit channel values to `[0, 1]`.
pub fn normalize_frames(raw: &[u8], shape: &[usize]) -> Result<Tensor<f32>> {
    Tensor::from_vec(shape, raw.iter().map(|&v| v as f32 / 255.0).collect())
}

/// Sliding windows of [`SEGMENT_LEN`] frames with stride 1, each labelled
/// with the steering value of its last frame.
pub fn segment_stream(frames: &[Tensor<f32>], labels: &[f32]) -> Result<Vec<Sample>> {
    segment_stream_strided(frames, labels, 1)
}

/// As [`segment_stream`] with windows starting every `stride` frames.
pub fn segment_stream_strided(frames: &[Tensor<f32>], labels: &[f32], stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::Config("segment stride must be at least 1".into()));
    }
    if frames.len() != labels.len() {
        return Err(Error::dim("segment_stream", "labels", frames.len(), labels.len()));
    }
    if frames.len() < SEGMENT_LEN {
        eprintln!("warning: {} frames is fewer than one {SEGMENT_LEN}-frame segment; no samples produced", frames.len());
        return Ok(Vec::new());
    }
    let frame_shape = frames[0].shape();
    if frame_shape.len() != 3 {
        return Err(Error::dim("segment_stream", "frame rank", 3, frame_shape.len()));
    }
    for f in frames {
        frames[0].same_shape(f, "segment_stream")?;
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + SEGMENT_LEN <= frames.len() {
        let last = start + SEGMENT_LEN - 1;
        let clip = Tensor::stack(&frames[start..=last])?;
        out.push(Sample { segment: FrameSegment { frames: clip, timestamp_index: last }, steering_deg: labels[last] });
        start += stride;
    }
    Ok(out)
}

/// A homogeneous collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 4],
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Usage("dataset holds no samples".into()))?;
        let s = first.segment.frames.shape();
        if s.len() != 4 {
            return Err(Error::dim("Dataset::new", "segment rank", 4, s.len()));
        }
        let shape = [s[0], s[1], s[2], s[3]];
        for (i, sample) in samples.iter().enumerate() {
            if sample.segment.frames.shape() != shape {
                return Err(Error::dim(
                    "Dataset::new",
                    format!("sample {i} shape"),
                    format!("{shape:?}"),
                    format!("{:?}", sample.segment.frames.shape()),
                ));
            }
            if !sample.steering_deg.is_finite() {
                return Err(Error::NonFinite { tensor: format!("label of sample {i}") });
            }
        }
        Ok(Self { shape, samples })
    }

    /// (T, C, H, W) of every segment.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// Stacks the selected segments into (m,T,C,H,W) and returns their
    /// labels in degrees.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<f32>)> {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Usage(format!("sample index {i} out of range (dataset has {})", self.len())))?;
            data.extend_from_slice(s.segment.frames.data());
            labels.push(s.steering_deg);
        }
        let [t, c, h, w] = self.shape;
        Ok((Tensor::from_vec(&[indices.len(), t, c, h, w], data)?, labels))
    }
}
