//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each suite builds a small random instance, reduces the output to a scalar
//! with fixed random weights, and compares analytic gradients against
//! `(L(θ+h) − L(θ−h)) / 2h` on sampled coordinates of every tensor.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::conv_lstm::PARAM_NAMES;
use crate::layers::{
    batch_norm_backward, batch_norm_train, conv_lstm_backward_sequence, conv_lstm_forward_sequence_cached,
    conv_lstm_step_backward, conv_lstm_step_cached, dense_backward, dense_batch, leaky_relu, leaky_relu_backward,
    BatchNormParams, ConvLstmParams, ConvLstmState, DEFAULT_LEAKY_SLOPE,
};
use crate::model::{Mode, Model, NetworkSpec};
use crate::tensor::{conv2d, conv2d_backward, conv3d, conv3d_backward, ConvSpec, Padding, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Coordinates checked per tensor (all of them when the tensor is smaller).
pub const SAMPLES_PER_TENSOR: usize = 20;
/// Denominator floor of the relative error, so that pairs of gradients that
/// both vanish compare by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
/// Default tolerance; the whole-model suite allows ten times this.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Pre-activations closer than this to a LeakyReLU kink are not sampled.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Conv2d,
    Conv3d,
    Dense,
    LeakyRelu,
    BatchNorm,
    ConvLstm,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 7] =
        [Suite::Conv2d, Suite::Conv3d, Suite::Dense, Suite::LeakyRelu, Suite::BatchNorm, Suite::ConvLstm, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Conv2d => "conv2d",
            Suite::Conv3d => "conv3d",
            Suite::Dense => "dense",
            Suite::LeakyRelu => "leaky_relu",
            Suite::BatchNorm => "bn",
            Suite::ConvLstm => "convlstm",
            Suite::Model => "model",
        }
    }

    /// Allowed worst relative error for a base tolerance.
    pub fn tolerance(self, base: f64) -> f64 {
        match self {
            Suite::Model => 10.0 * base,
            _ => base,
        }
    }

    fn seed_offset(self) -> u64 {
        Suite::ALL.iter().position(|&s| s == self).expect("listed") as u64 * 1_000_003
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub worst_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }

    /// NaN never passes.
    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance && self.tensors.iter().all(|t| t.worst_rel_error.is_finite())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self.worst_tensor().map(|t| t.name.as_str()).unwrap_or("-");
        write!(
            f,
            "{:<10} worst_rel_err={:.3e} tol={:.1e} params={:<5} worst_tensor={:<16} {}",
            self.suite.name(),
            self.worst(),
            self.tolerance,
            self.checked(),
            worst,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// Uniform in ±[KINK_MARGIN·10, 1], never near zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(10.0 * KINK_MARGIN..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("positive shape")
}

fn weighted_sum(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Compares `analytic[t]` against central differences of `loss`.
/// `loss(t, i, delta)` evaluates the objective with coordinate i of tensor
/// t shifted by delta, or returns `None` when that shift crosses a kink, in
/// which case another coordinate is drawn.
fn check<F>(names: &[String], analytic: &[&Tensor<f64>], mut loss: F, rng: &mut ChaCha8Rng) -> Vec<TensorCheck>
where
    F: FnMut(usize, usize, f64) -> Option<f64>,
{
    names
        .iter()
        .zip(analytic)
        .enumerate()
        .map(|(t, (name, grad))| {
            let mut order: Vec<usize> = (0..grad.len()).collect();
            order.shuffle(rng);
            let want = SAMPLES_PER_TENSOR.min(grad.len());
            let mut checked = 0;
            let mut worst = 0.0f64;
            for &i in &order {
                if checked == want {
                    break;
                }
                let (Some(up), Some(down)) = (loss(t, i, FD_STEP), loss(t, i, -FD_STEP)) else { continue };
                let numeric = (up - down) / (2.0 * FD_STEP);
                let err = relative_error(grad.data()[i], numeric);
                worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
                checked += 1;
            }
            TensorCheck { name: name.clone(), checked, worst_rel_error: worst }
        })
        .collect()
}

fn perturbed(tensors: &[Tensor<f64>], t: usize, i: usize, delta: f64) -> Vec<Tensor<f64>> {
    let mut v = tensors.to_vec();
    v[t].data_mut()[i] += delta;
    v
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn run_suite(suite: Suite, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(suite.seed_offset()));
    let tensors = match suite {
        Suite::Conv2d => conv2d_suite(&mut rng)?,
        Suite::Conv3d => conv3d_suite(&mut rng)?,
        Suite::Dense => dense_suite(&mut rng)?,
        Suite::LeakyRelu => leaky_suite(&mut rng)?,
        Suite::BatchNorm => batch_norm_suite(&mut rng)?,
        Suite::ConvLstm => conv_lstm_suite(&mut rng)?,
        Suite::Model => model_suite(&mut rng)?,
    };
    Ok(SuiteReport { suite, tolerance: suite.tolerance(tolerance), tensors })
}

pub fn run_suites(suites: &[Suite], seed: u64, tolerance: f64) -> Result<Vec<SuiteReport>> {
    suites.iter().map(|&s| run_suite(s, seed, tolerance)).collect()
}

fn conv2d_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    let cases = [
        ("s1", ConvSpec::conv2d(2, 3, (3, 3), (1, 1), Padding::Same), (5, 6)),
        ("s2", ConvSpec::conv2d(2, 2, (4, 3), (2, 2), Padding::Same), (7, 6)),
        ("valid", ConvSpec::conv2d(3, 2, (3, 2), (1, 2), Padding::Valid), (5, 7)),
    ];
    for (tag, spec, (h, w)) in cases {
        let (kh, kw) = (spec.kernel[1], spec.kernel[2]);
        let x = random_tensor(&[spec.in_channels, h, w], -1.0, 1.0, rng);
        let k = random_tensor(&[spec.out_channels, spec.in_channels, kh, kw], -0.5, 0.5, rng);
        let b = random_tensor(&[spec.out_channels], -0.5, 0.5, rng);
        let y = conv2d(&x, &k, &b, &spec)?;
        let r = random_tensor(y.shape(), -1.0, 1.0, rng);
        let g = conv2d_backward(&x, &k, &r, &spec)?;
        let base = [x, k, b];
        let n = names(&[&format!("{tag}.input"), &format!("{tag}.kernels"), &format!("{tag}.bias")]);
        out.extend(check(
            &n,
            &[&g.input, &g.kernels, &g.bias],
            |t, i, d| {
                let p = perturbed(&base, t, i, d);
                Some(weighted_sum(&conv2d(&p[0], &p[1], &p[2], &spec).ok()?, &r))
            },
            rng,
        ));
    }
    Ok(out)
}

fn conv3d_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    let cases = [
        ("collapse", ConvSpec::conv3d(2, 3, (3, 3, 3), (1, 1, 1), Padding::Same), (3, 5, 4)),
        ("strided", ConvSpec::conv3d(2, 2, (2, 3, 3), (1, 2, 2), Padding::Same), (4, 5, 6)),
    ];
    for (tag, spec, (t_n, h, w)) in cases {
        let [kt, kh, kw] = spec.kernel;
        let x = random_tensor(&[spec.in_channels, t_n, h, w], -1.0, 1.0, rng);
        let k = random_tensor(&[spec.out_channels, spec.in_channels, kt, kh, kw], -0.5, 0.5, rng);
        let b = random_tensor(&[spec.out_channels], -0.5, 0.5, rng);
        let y = conv3d(&x, &k, &b, &spec)?;
        let r = random_tensor(y.shape(), -1.0, 1.0, rng);
        let g = conv3d_backward(&x, &k, &r, &spec)?;
        let base = [x, k, b];
        let n = names(&[&format!("{tag}.input"), &format!("{tag}.kernels"), &format!("{tag}.bias")]);
        out.extend(check(
            &n,
            &[&g.input, &g.kernels, &g.bias],
            |t, i, d| {
                let p = perturbed(&base, t, i, d);
                Some(weighted_sum(&conv3d(&p[0], &p[1], &p[2], &spec).ok()?, &r))
            },
            rng,
        ));
    }
    Ok(out)
}

fn dense_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let x = random_tensor(&[3, 7], -1.0, 1.0, rng);
    let w = random_tensor(&[5, 7], -0.5, 0.5, rng);
    let b = random_tensor(&[5], -0.5, 0.5, rng);
    let r = random_tensor(&[3, 5], -1.0, 1.0, rng);
    let g = dense_backward(&x, &w, &r)?;
    let base = [x, w, b];
    Ok(check(
        &names(&["input", "weights", "bias"]),
        &[&g.input, &g.weights, &g.bias],
        |t, i, d| {
            let p = perturbed(&base, t, i, d);
            Some(weighted_sum(&dense_batch(&p[0], &p[1], &p[2]).ok()?, &r))
        },
        rng,
    ))
}

fn leaky_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let x = away_from_zero(&[4, 6], rng);
    let r = random_tensor(&[4, 6], -1.0, 1.0, rng);
    let g = leaky_relu_backward(&x, &r, DEFAULT_LEAKY_SLOPE)?;
    let base = [x];
    Ok(check(
        &names(&["input"]),
        &[&g],
        |t, i, d| {
            let p = perturbed(&base, t, i, d);
            Some(weighted_sum(&leaky_relu(&p[0], DEFAULT_LEAKY_SLOPE), &r))
        },
        rng,
    ))
}

fn batch_norm_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let x = random_tensor(&[4, 3, 2, 3, 3], -1.0, 2.0, rng);
    let mut params = BatchNormParams::<f64>::new(2);
    params.gamma = random_tensor(&[2], 0.5, 1.5, rng);
    params.beta = random_tensor(&[2], -0.5, 0.5, rng);
    let (y, cache, _) = batch_norm_train(&x, 2, &params)?;
    let r = random_tensor(y.shape(), -1.0, 1.0, rng);
    let (dx, dgamma, dbeta) = batch_norm_backward(&cache, &params, &r)?;
    let base = [x, params.gamma.clone(), params.beta.clone()];
    Ok(check(
        &names(&["input", "gamma", "beta"]),
        &[&dx, &dgamma, &dbeta],
        |t, i, d| {
            let p = perturbed(&base, t, i, d);
            let mut bn = params.clone();
            bn.gamma = p[1].clone();
            bn.beta = p[2].clone();
            Some(weighted_sum(&batch_norm_train(&p[0], 2, &bn).ok()?.0, &r))
        },
        rng,
    ))
}

fn random_cell(cin: usize, f: usize, k: usize, hw: (usize, usize), rng: &mut ChaCha8Rng) -> ConvLstmParams<f64> {
    let mut p = ConvLstmParams::<f64>::init(cin, f, k, hw, rng);
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(&shape, -0.6, 0.6, rng);
    }
    p
}

fn with_tensors(params: &ConvLstmParams<f64>, tensors: &[Tensor<f64>]) -> ConvLstmParams<f64> {
    let mut p = params.clone();
    for (dst, src) in p.tensors_mut().into_iter().zip(tensors) {
        *dst = src.clone();
    }
    p
}

fn conv_lstm_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    let (cin, f, h, w) = (2, 2, 4, 3);

    // Single step from a nonzero state; h and c of the next state both feed
    // the objective.
    let params = random_cell(cin, f, 3, (h, w), rng);
    let x = random_tensor(&[cin, h, w], -1.0, 1.0, rng);
    let prev = ConvLstmState { h: random_tensor(&[f, h, w], -0.9, 0.9, rng), c: random_tensor(&[f, h, w], -1.0, 1.0, rng) };
    let rh = random_tensor(&[f, h, w], -1.0, 1.0, rng);
    let rc = random_tensor(&[f, h, w], -1.0, 1.0, rng);
    let (_, _, cache) = conv_lstm_step_cached(&x, &prev, &params)?;
    let g = conv_lstm_step_backward(&cache, &params, &rh, Some(&rc))?;
    let gs = g.state.as_ref().expect("state gradient");
    let mut base: Vec<Tensor<f64>> = vec![x, prev.h.clone(), prev.c.clone()];
    base.extend(params.tensors().into_iter().cloned());
    let mut n = names(&["step.x", "step.h_prev", "step.c_prev"]);
    n.extend(PARAM_NAMES.iter().map(|p| format!("step.{p}")));
    let mut analytic: Vec<&Tensor<f64>> = vec![g.input.as_ref().expect("input gradient"), &gs.h, &gs.c];
    analytic.extend(g.params.tensors());
    out.extend(check(
        &n,
        &analytic,
        |t, i, d| {
            let p = perturbed(&base, t, i, d);
            let cell = with_tensors(&params, &p[3..]);
            let state = ConvLstmState { h: p[1].clone(), c: p[2].clone() };
            let (_, next, _) = conv_lstm_step_cached(&p[0], &state, &cell).ok()?;
            Some(weighted_sum(&next.h, &rh) + weighted_sum(&next.c, &rc))
        },
        rng,
    ));

    // Three-step BPTT from a nonzero initial state.
    let params = random_cell(cin, f, 3, (h, w), rng);
    let xs = random_tensor(&[3, cin, h, w], -1.0, 1.0, rng);
    let init = ConvLstmState { h: random_tensor(&[f, h, w], -0.9, 0.9, rng), c: random_tensor(&[f, h, w], -1.0, 1.0, rng) };
    let (ys, cache) = conv_lstm_forward_sequence_cached(&xs, &params, &init)?;
    let r = random_tensor(ys.shape(), -1.0, 1.0, rng);
    let g = conv_lstm_backward_sequence(&cache, &params, &r, true, true)?;
    let gs = g.state.as_ref().expect("initial-state gradient");
    let mut base: Vec<Tensor<f64>> = vec![xs, init.h.clone(), init.c.clone()];
    base.extend(params.tensors().into_iter().cloned());
    let mut n = names(&["bptt.x", "bptt.h0", "bptt.c0"]);
    n.extend(PARAM_NAMES.iter().map(|p| format!("bptt.{p}")));
    let mut analytic: Vec<&Tensor<f64>> = vec![g.input.as_ref().expect("input gradient"), &gs.h, &gs.c];
    analytic.extend(g.params.tensors());
    out.extend(check(
        &n,
        &analytic,
        |t, i, d| {
            let p = perturbed(&base, t, i, d);
            let cell = with_tensors(&params, &p[3..]);
            let state = ConvLstmState { h: p[1].clone(), c: p[2].clone() };
            let (ys, _) = conv_lstm_forward_sequence_cached(&p[0], &cell, &state).ok()?;
            Some(weighted_sum(&ys, &r))
        },
        rng,
    ));
    Ok(out)
}

fn model_suite(rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let spec = NetworkSpec::tiny(8, 8);
    let model = Model::<f32>::build(&spec, rng.gen())?.cast::<f64>();
    let [t, c, h, w] = spec.input_shape;
    let m = 2;
    let batch = random_tensor(&[m, t, c, h, w], 0.0, 1.0, rng);
    // Plain sum of the predictions.
    let r = vec![1.0; m];
    // Dropout is disabled in the tiny spec, so the forward ignores this rng.
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = model.forward(&batch, Mode::Train, &mut fwd_rng)?;
    let signs = cache.activation_signs();
    let grads = model.backward(&cache, &r)?;
    let params = model.params();
    let n: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<&Tensor<f64>> = grads.entries.iter().map(|(_, t)| t).collect();
    Ok(check(
        &n,
        &analytic,
        |ti, i, d| {
            let mut probe = model.clone();
            probe.params_mut()[ti].1.data_mut()[i] += d;
            let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
            let (preds, cache) = probe.forward(&batch, Mode::Train, &mut fwd_rng).ok()?;
            if cache.activation_signs() != signs {
                return None;
            }
            Some(preds.iter().zip(&r).map(|(p, w)| p * w).sum())
        },
        rng,
    ))
}
