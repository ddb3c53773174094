//! A deterministic lane-following world rendered at low resolution.
//!
//! The road is drawn in a simple perspective: for a road row at depth
//! d ∈ (0,1) (0 at the bottom edge, 1 at the horizon) the lane centre sits
//! at `CURVE_GAIN·κ·d²` in normalized column units and the lane narrows with
//! depth. Column centres `u_j = ((2j+1) − W)/W` are exactly antisymmetric,
//! so negating κ mirrors every frame bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize_frames, segment_stream_strided, Sample, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label gain: steering degrees per unit curvature.
pub const STEERING_GAIN: f64 = 400.0;
pub const KAPPA_MAX: f64 = 0.05;

const CURVE_GAIN: f64 = 10.0;
const HORIZON_FRACTION: f64 = 0.25;
const DASH_FREQUENCY: f64 = 3.0;
const DASH_DUTY: f64 = 0.6;
const SHOULDER: f64 = 0.15;

const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const ROAD: [f64; 3] = [0.25, 0.25, 0.27];
const GRASS: [f64; 3] = [0.2, 0.45, 0.2];
const PAINT: [f64; 3] = [1.0, 0.95, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    Constant { curvature: f64 },
    /// `amplitude·sin(2πt/period + φ)` with φ drawn from the seed.
    Sine { amplitude: f64, period: f64 },
    /// Gaussian increments of standard deviation `step`, reflected at ±κ_max.
    RandomWalk { step: f64 },
}

impl CurvatureMode {
    pub fn profile(&self, frames: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6e65);
        match *self {
            CurvatureMode::Constant { curvature } => Ok(vec![curvature; frames]),
            CurvatureMode::Sine { amplitude, period } => {
                if !(period > 0.0) {
                    return Err(Error::Config(format!("sine period must be positive, got {period}")));
                }
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                Ok((0..frames).map(|t| amplitude * (std::f64::consts::TAU * t as f64 / period + phase).sin()).collect())
            }
            CurvatureMode::RandomWalk { step } => {
                let normal = Normal::new(0.0, step).map_err(|e| Error::Config(format!("random-walk step: {e}")))?;
                let mut k = 0.0f64;
                Ok((0..frames)
                    .map(|_| {
                        let cur = k;
                        k += normal.sample(&mut rng);
                        if k > KAPPA_MAX {
                            k = 2.0 * KAPPA_MAX - k;
                        } else if k < -KAPPA_MAX {
                            k = -2.0 * KAPPA_MAX - k;
                        }
                        k = k.clamp(-KAPPA_MAX, KAPPA_MAX);
                        cur
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneWorld {
    /// Curvature per rendered frame.
    pub curvature_profile: Vec<f64>,
    /// Lane half-width at the bottom edge, in normalized column units.
    pub lane_width: f64,
    /// Dash phase advance per frame.
    pub vehicle_speed: f64,
    /// Standard deviation of additive pixel noise in `[0,1]` units.
    pub noise_level: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl LaneWorld {
    /// A 32×64 noiseless world with the given curvature profile.
    pub fn new(curvature_profile: Vec<f64>, seed: u64) -> Self {
        Self { curvature_profile, lane_width: 0.5, vehicle_speed: 0.15, noise_level: 0.0, seed, height: 32, width: 64 }
    }

    /// Enough frames for `count` segments at `stride`, drawn from `mode`.
    pub fn from_mode(mode: &CurvatureMode, count: usize, stride: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(mode.profile(frames_needed(count, stride), seed)?, seed))
    }

    fn validate(&self, frames: usize) -> Result<()> {
        if self.height < 4 || self.width < 2 {
            return Err(Error::Config(format!("frame size {}x{} is too small", self.height, self.width)));
        }
        if self.curvature_profile.len() < frames {
            return Err(Error::Config(format!(
                "curvature profile has {} frames, {frames} are needed",
                self.curvature_profile.len()
            )));
        }
        if let Some((t, k)) = self.curvature_profile.iter().enumerate().find(|(_, k)| !(k.abs() <= KAPPA_MAX)) {
            return Err(Error::Config(format!("curvature {k} at frame {t} exceeds the limit {KAPPA_MAX}")));
        }
        if !(self.noise_level >= 0.0) || !(self.lane_width > 0.0) || !self.vehicle_speed.is_finite() {
            return Err(Error::Config("noise level, lane width and speed must be finite, noise ≥ 0, width > 0".into()));
        }
        Ok(())
    }

    /// Renders frame `t` to 8-bit channels-first pixels.
    fn render(&self, t: usize, noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let kappa = self.curvature_profile[t];
        let horizon = (h as f64 * HORIZON_FRACTION).round() as usize;
        let road_rows = (h - horizon) as f64;
        let mut rgb = vec![[0.0f64; 3]; h * w];
        for r in 0..h {
            for j in 0..w {
                let px = &mut rgb[r * w + j];
                if r < horizon {
                    *px = SKY;
                    continue;
                }
                let d = ((h - r) as f64 - 0.5) / road_rows;
                let u = ((2 * j + 1) as f64 - w as f64) / w as f64;
                let offset = CURVE_GAIN * kappa * d * d;
                let half = self.lane_width * (1.0 - 0.7 * d);
                let thickness = 0.06 * (1.0 - 0.5 * d);
                let along = d * DASH_FREQUENCY + self.vehicle_speed * t as f64;
                let painted = along - along.floor() < DASH_DUTY;
                let base = if (u - offset).abs() > half + SHOULDER { GRASS } else { ROAD };
                let a = if painted {
                    let left = (u - (offset - half)).abs();
                    let right = (u - (offset + half)).abs();
                    (1.0 - left.min(right) / thickness).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                for c in 0..3 {
                    px[c] = base[c] * (1.0 - a) + PAINT[c] * a;
                }
            }
        }
        let mut out = vec![0u8; 3 * h * w];
        let mut noise = noise;
        for c in 0..3 {
            for (i, px) in rgb.iter().enumerate() {
                let mut v = px[c];
                if let Some((dist, rng)) = noise.as_mut() {
                    v += dist.sample(*rng);
                }
                out[c * h * w + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}

fn frames_needed(count: usize, stride: usize) -> usize {
    if count == 0 {
        0
    } else {
        (count - 1) * stride + SEGMENT_LEN
    }
}

/// Renders the world and cuts it into `count` stride-1 segments labelled
/// `STEERING_GAIN·κ` at their last frame.
pub fn generate_lane_dataset(world: &LaneWorld, count: usize) -> Result<Vec<Sample>> {
    generate_lane_dataset_strided(world, count, 1)
}

pub fn generate_lane_dataset_strided(world: &LaneWorld, count: usize, stride: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if stride == 0 {
        return Err(Error::Config("segment stride must be at least 1".into()));
    }
    let n = frames_needed(count, stride);
    world.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let normal = Normal::new(0.0, world.noise_level).map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let shape = [3, world.height, world.width];
    let frames = (0..n)
        .map(|t| {
            let noise = (world.noise_level > 0.0).then_some((&normal, &mut rng));
            normalize_frames(&world.render(t, noise), &shape)
        })
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    let labels: Vec<f32> = world.curvature_profile[..n].iter().map(|k| (STEERING_GAIN * k) as f32).collect();
    segment_stream_strided(&frames, &labels, stride)
}
