//! Per-channel batch normalization.
//!
//! Statistics are taken over every axis except `channel_axis`; the leading
//! axis is the batch. Reductions accumulate in `f64` regardless of storage.

use super::check_shape;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<S = f32> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub epsilon: f64,
    pub momentum: f64,
    /// Number of training batches folded into the running statistics.
    pub updates: u64,
}

/// Biased per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<S = f32> {
    x_hat: Tensor<S>,
    inv_std: Vec<f64>,
    channel_axis: usize,
}

impl<S: Scalar> BatchNormParams<S> {
    /// γ = 1, β = 0, running mean 0 and variance 1, not yet populated.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = S::lit(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = S::lit(m * r.as_f64() + (1.0 - m) * b);
        }
        self.updates += 1;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("batch-norm epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("batch-norm momentum must be in (0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of<S: Scalar>(x: &Tensor<S>, channel_axis: usize, params: &BatchNormParams<S>) -> Result<Self> {
        if channel_axis == 0 || channel_axis >= x.ndim() {
            return Err(Error::dim("batch_norm", "channel axis", format!("1..{}", x.ndim()), channel_axis));
        }
        let s = x.shape();
        check_shape("batch_norm", "channels", &[params.channels()], &s[channel_axis..=channel_axis])?;
        Ok(Self {
            outer: s[..channel_axis].iter().product(),
            channels: s[channel_axis],
            inner: s[channel_axis + 1..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Visits every flat index of channel `c`.
    fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Training-mode normalization with batch statistics. The running stats are
/// not touched; apply the returned [`BatchStats`] with
/// [`BatchNormParams::update_running`].
pub fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    channel_axis: usize,
    params: &BatchNormParams<S>,
) -> Result<(Tensor<S>, BatchNormCache<S>, BatchStats)> {
    params.validate()?;
    let layout = Layout::of(x, channel_axis, params)?;
    if x.shape()[0] < 2 {
        return Err(Error::Config(format!("batch norm in training mode needs a batch of at least 2, got {}", x.shape()[0])));
    }
    let data = x.data();
    let count = layout.count() as f64;
    let mut y = vec![S::zero(); x.len()];
    let mut x_hat = vec![S::zero(); x.len()];
    let mut stats = BatchStats { mean: Vec::with_capacity(layout.channels), var: Vec::with_capacity(layout.channels) };
    let mut inv_stds = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        let mut sum = 0.0;
        layout.for_channel(c, |i| sum += data[i].as_f64());
        let mean = sum / count;
        let mut sq = 0.0;
        layout.for_channel(c, |i| {
            let d = data[i].as_f64() - mean;
            sq += d * d;
        });
        let var = sq / count;
        let inv_std = 1.0 / (var + params.epsilon).sqrt();
        let (g, b) = (params.gamma.data()[c].as_f64(), params.beta.data()[c].as_f64());
        layout.for_channel(c, |i| {
            let xh = (data[i].as_f64() - mean) * inv_std;
            x_hat[i] = S::lit(xh);
            y[i] = S::lit(g * xh + b);
        });
        stats.mean.push(mean);
        stats.var.push(var);
        inv_stds.push(inv_std);
    }
    let cache = BatchNormCache { x_hat: Tensor::from_vec(x.shape(), x_hat)?, inv_std: inv_stds, channel_axis };
    Ok((Tensor::from_vec(x.shape(), y)?, cache, stats))
}

/// Inference-mode normalization with the running statistics.
pub fn batch_norm_infer<S: Scalar>(x: &Tensor<S>, channel_axis: usize, params: &BatchNormParams<S>) -> Result<Tensor<S>> {
    params.validate()?;
    if params.updates == 0 {
        return Err(Error::Config("batch-norm running statistics were never populated by a training batch".into()));
    }
    let layout = Layout::of(x, channel_axis, params)?;
    let data = x.data();
    let mut y = vec![S::zero(); x.len()];
    for c in 0..layout.channels {
        let mean = params.running_mean.data()[c].as_f64();
        let inv_std = 1.0 / (params.running_var.data()[c].as_f64() + params.epsilon).sqrt();
        let (g, b) = (params.gamma.data()[c].as_f64(), params.beta.data()[c].as_f64());
        layout.for_channel(c, |i| y[i] = S::lit(g * (data[i].as_f64() - mean) * inv_std + b));
    }
    Tensor::from_vec(x.shape(), y)
}

/// Returns (dL/dx, dL/dγ, dL/dβ), differentiating through the batch
/// statistics.
pub fn batch_norm_backward<S: Scalar>(
    cache: &BatchNormCache<S>,
    params: &BatchNormParams<S>,
    grad_output: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    check_shape("batch_norm_backward", "grad_output", cache.x_hat.shape(), grad_output.shape())?;
    let layout = Layout::of(grad_output, cache.channel_axis, params)?;
    let (gy, xh) = (grad_output.data(), cache.x_hat.data());
    let count = layout.count() as f64;
    let mut dx = vec![S::zero(); gy.len()];
    let mut dgamma = Vec::with_capacity(layout.channels);
    let mut dbeta = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        layout.for_channel(c, |i| {
            let g = gy[i].as_f64();
            sum_g += g;
            sum_gx += g * xh[i].as_f64();
        });
        dgamma.push(S::lit(sum_gx));
        dbeta.push(S::lit(sum_g));
        let gamma = params.gamma.data()[c].as_f64();
        let scale = gamma * cache.inv_std[c] / count;
        layout.for_channel(c, |i| {
            let v = count * gy[i].as_f64() - sum_g - xh[i].as_f64() * sum_gx;
            dx[i] = S::lit(scale * v);
        });
    }
    let c = layout.channels;
    Ok((Tensor::from_vec(grad_output.shape(), dx)?, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut p = BatchNormParams::<f64>::new(2);
        p.beta = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let x = Tensor::full(&[4, 2, 3], 5.0);
        let (y, _, stats) = batch_norm_train(&x, 1, &p).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
        for o in 0..4 {
            for c in 0..2 {
                for i in 0..3 {
                    assert_eq!(y.data()[(o * 2 + c) * 3 + i], p.beta.data()[c]);
                }
            }
        }
    }

    #[test]
    fn three_values_one_channel() {
        let p = BatchNormParams::<f64>::new(1);
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _, stats) = batch_norm_train(&x, 1, &p).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-15);
        assert!((stats.var[0] - 2.0 / 3.0).abs() < 1e-15);
        let denom = (2.0f64 / 3.0 + 1e-5).sqrt();
        for (yi, xi) in y.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((yi - (xi - 2.0) / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.gamma = Tensor::zeros(&[1]);
        p.beta = Tensor::full(&[1], 1.5);
        let x = Tensor::from_vec(&[4, 1], vec![-3.0, 0.1, 7.0, 2.0]).unwrap();
        let (y, _, _) = batch_norm_train(&x, 1, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn singleton_batch_is_a_config_error() {
        let p = BatchNormParams::<f32>::new(1);
        let err = batch_norm_train(&Tensor::zeros(&[1, 1, 4]), 1, &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn infer_requires_populated_stats() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1], vec![0.5, -0.5]).unwrap();
        assert!(matches!(batch_norm_infer(&x, 1, &p), Err(Error::Config(_))));
        p.updates = 1;
        let y = batch_norm_infer(&x, 1, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(((a - b) / b).abs() <= 1e-4);
        }
    }

    #[test]
    fn infer_at_running_mean_gives_beta() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.running_mean = Tensor::full(&[1], 2.5);
        p.running_var = Tensor::full(&[1], 4.0);
        p.beta = Tensor::full(&[1], -0.2);
        p.gamma = Tensor::full(&[1], 3.0);
        p.updates = 5;
        let y = batch_norm_infer(&Tensor::full(&[3, 1, 2], 2.5), 1, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.2));
    }

    #[test]
    fn infer_matches_train_when_stats_coincide() {
        let mut p = BatchNormParams::<f64>::new(2);
        p.gamma = Tensor::from_vec(&[2], vec![1.3, 0.4]).unwrap();
        p.beta = Tensor::from_vec(&[2], vec![0.1, -0.6]).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![0.2, 1.0, -0.4, 3.0, 1.1, -2.0]).unwrap();
        let (y_train, _, stats) = batch_norm_train(&x, 1, &p).unwrap();
        p.running_mean = Tensor::from_vec(&[2], stats.mean.clone()).unwrap();
        p.running_var = Tensor::from_vec(&[2], stats.var.clone()).unwrap();
        p.updates = 1;
        for s in 0..3 {
            let single = Tensor::from_vec(&[1, 2], x.data()[s * 2..s * 2 + 2].to_vec()).unwrap();
            let y = batch_norm_infer(&single, 1, &p).unwrap();
            for c in 0..2 {
                assert!((y.data()[c] - y_train.data()[s * 2 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.update_running(&BatchStats { mean: vec![1.0], var: vec![3.0] });
        assert!((p.running_mean.data()[0] - 0.01).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.99 + 0.03)).abs() < 1e-12);
        assert_eq!(p.updates, 1);
    }
}
