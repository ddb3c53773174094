//! MSE loss, Adam and the training loop.

mod train;

pub use train::{train, MetricRecord, TrainSink, TrainSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean squared error and its gradient with respect to `predicted`.
pub fn mse_loss<S: Scalar>(predicted: &[S], actual: &[S]) -> Result<(f64, Vec<S>)> {
    if predicted.len() != actual.len() {
        return Err(Error::dim("mse_loss", "actual", predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(Error::dim("mse_loss", "predicted", "at least 1 value", 0));
    }
    let m = predicted.len() as f64;
    let loss = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            let d = p.as_f64() - a.as_f64();
            d * d
        })
        .sum::<f64>()
        / m;
    let grad = predicted.iter().zip(actual).map(|(&p, &a)| S::lit(2.0 / m) * (p - a)).collect();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, aligned with the parameter list
/// passed to [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f32> {
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let first: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, second: first.clone(), first }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut AdamState<S>,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::dim("adam_step", "parameter count", params.len(), grads.len().min(state.first.len())));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.first.iter().zip(&state.second)) {
        p.same_shape(g, "adam_step")?;
        p.same_shape(m, "adam_step")?;
        p.same_shape(v, "adam_step")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (sb1, sb2) = (S::lit(b1), S::lit(b2));
    let (sb1c, sb2c) = (S::lit(1.0 - b1), S::lit(1.0 - b2));
    let (sc1, sc2) = (S::lit(c1), S::lit(c2));
    let (lr, eps) = (S::lit(config.learning_rate), S::lit(config.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        let pd = p.data_mut();
        for (((theta, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = sb1 * *mi + sb1c * gi;
            *vi = sb2 * *vi + sb2c * gi * gi;
            let m_hat = *mi / sc1;
            let v_hat = *vi / sc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(f);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Adds `wall_ms` to every metric record. Off by default so that metric
    /// streams are reproducible byte-for-byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 10,
            seed: 0,
            shuffle: true,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", a.learning_rate)));
        }
        for (name, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", a.eps)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_cases() {
        let (l, g) = mse_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = mse_loss(&[1.0f64, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.0);
        assert!(matches!(mse_loss(&[1.0f64], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mse_random_matches_scalar_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (l, g) = mse_loss(&p, &a).unwrap();
        let mut direct = 0.0;
        for i in 0..5 {
            direct += (p[i] - a[i]) * (p[i] - a[i]);
        }
        assert!((l - direct / 5.0).abs() < 1e-15);
        let h = 1e-6;
        for i in 0..5 {
            let mut hi = p.clone();
            hi[i] += h;
            let mut lo = p.clone();
            lo[i] -= h;
            let fd = (mse_loss(&hi, &a).unwrap().0 - mse_loss(&lo, &a).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(&[3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();
        let g = Tensor::from_vec(&[4], vec![0.3, -2.0, 1e-3, -7.0]).unwrap();
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
        for (theta, gi) in p.data().iter().zip(g.data()) {
            assert!((theta + cfg.learning_rate * gi.signum()).abs() <= cfg.learning_rate * 1e-3);
        }
    }

    #[test]
    fn two_scalar_steps_match_transcription() {
        let cfg = AdamConfig { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = Tensor::from_vec(&[1], vec![1.5f64]).unwrap();
        let mut state = AdamState::new([&p]);
        let grads = [0.4f64, -0.25];
        let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let gt = Tensor::from_vec(&[1], vec![g]).unwrap();
            adam_step(&mut [&mut p], &[&gt], &mut state, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_step_descends_a_linear_head() {
        // Frozen features, dense head trained by least squares.
        let mut violations = 0;
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let (m, n) = (16, 6);
            let x = Tensor::<f64>::from_vec(&[m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w = Tensor::from_vec(&[1, n], (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
            let mut b = Tensor::zeros(&[1]);
            let loss = |w: &Tensor<f64>, b: &Tensor<f64>| {
                let out = crate::layers::dense_batch(&x, w, b).unwrap();
                mse_loss(out.data(), &y).unwrap()
            };
            let (before, g) = loss(&w, &b);
            let g = Tensor::from_vec(&[m, 1], g).unwrap();
            let grads = crate::layers::dense_backward(&x, &w, &g).unwrap();
            let mut state = AdamState::new([&w, &b]);
            adam_step(&mut [&mut w, &mut b], &[&grads.weights, &grads.bias], &mut state, &AdamConfig::default()).unwrap();
            if loss(&w, &b).0 >= before {
                violations += 1;
            }
        }
        assert!(violations <= 1, "{violations} violations");
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut a = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut a], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a.data()[0] - 0.6).abs() < 1e-12 && (a.data()[1] - 0.8).abs() < 1e-12);
        let mut small = Tensor::from_vec(&[1], vec![0.5f64]).unwrap();
        clip_global_norm(&mut [&mut small], 1.0);
        assert_eq!(small.data(), &[0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = TrainConfig::default();
        bad.adam.beta2 = 1.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
