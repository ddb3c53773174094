//! The spatiotemporal ConvLSTM network and the single-frame CNN baseline.
//!
//! Spatiotemporal pipeline for a (3,3,H,W) segment:
//!
//! ```text
//! 4 × [ConvLSTM (full sequence) → BN]   (3,F,H,W)
//! Conv3D over (F,T,H,W), temporal-valid  (3,1,H,W)
//! flatten → dense(512) → LeakyReLU → dropout → dense(1)
//! ```
//!
//! The baseline reads only the last frame: four strided same-padded conv
//! layers with LeakyReLU, then the same dense head.

mod checkpoint;
mod spec;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{ModelKind, NetworkSpec, BASELINE_CONVS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, conv_lstm_backward_sequence,
    conv_lstm_forward_sequence_cached, dense_backward, dense_batch, dropout_backward, dropout_train, leaky_relu,
    leaky_relu_backward, BatchNormCache, BatchNormParams, BatchStats, ConvLstmParams, ConvLstmState, SequenceCache,
};
use crate::tensor::{ConvKernel, ConvPlan, ConvSpec, Padding, Scalar, Tensor};

/// Steering labels (degrees) are divided by this before training; model
/// outputs are multiplied by it.
pub const LABEL_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S = f32> {
    pub spec: ConvSpec,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<S = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body<S = f32> {
    Spatiotemporal { cells: Vec<ConvLstmParams<S>>, norms: Vec<BatchNormParams<S>>, conv3d: ConvLayer<S> },
    Baseline { convs: Vec<ConvLayer<S>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S = f32> {
    spec: NetworkSpec,
    body: Body<S>,
    fc1: DenseLayer<S>,
    fc2: DenseLayer<S>,
}

/// Per-parameter gradients in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S = f32> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let f = S::lit(factor);
        for (_, t) in &mut self.entries {
            t.scale_in_place(f);
        }
    }

    /// First gradient tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.as_str())
    }
}

fn init_uniform<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let mut t = Tensor::zeros(shape);
    crate::layers::uniform_fan_in(&mut t, fan_in, rng);
    t
}

impl<S: Scalar> ConvLayer<S> {
    fn new<R: Rng>(spec: ConvSpec, rng: Option<&mut R>) -> Self {
        let shape = [spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
        let shape: Vec<usize> = if spec.kernel[0] == 1 && spec.padding[0] == Padding::Valid && spec.stride[0] == 1 {
            vec![shape[0], shape[1], shape[3], shape[4]]
        } else {
            shape.to_vec()
        };
        let fan_in = spec.in_channels * spec.kernel_volume();
        let weight = match rng {
            Some(rng) => init_uniform(&shape, fan_in, rng),
            None => Tensor::zeros(&shape),
        };
        Self { spec, weight, bias: Tensor::zeros(&[spec.out_channels]) }
    }
}

impl<S: Scalar> DenseLayer<S> {
    fn new<R: Rng>(outputs: usize, inputs: usize, rng: Option<&mut R>) -> Self {
        let weight = match rng {
            Some(rng) => init_uniform(&[outputs, inputs], inputs, rng),
            None => Tensor::zeros(&[outputs, inputs]),
        };
        Self { weight, bias: Tensor::zeros(&[outputs]) }
    }
}

/// (filters, kernel, stride) per baseline layer with its output extents.
fn baseline_geometry(spec: &NetworkSpec) -> Vec<(ConvSpec, (usize, usize))> {
    let (mut h, mut w) = spec.spatial();
    let mut cin = spec.channels();
    BASELINE_CONVS
        .iter()
        .map(|&(filters, kernel, stride)| {
            let cs = ConvSpec::conv2d(cin, filters, (kernel, kernel), (stride, stride), Padding::Same);
            h = h.div_ceil(stride);
            w = w.div_ceil(stride);
            cin = filters;
            (cs, (h, w))
        })
        .collect()
}

/// (A, B, inner) → (B, A, inner).
fn swap_leading<S: Scalar>(data: &[S], a: usize, b: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

impl<S: Scalar> Model<S> {
    /// Builds either kind from `spec`, initialized from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        match spec.model_kind {
            ModelKind::SpatiotemporalLstm => Self::build_spatiotemporal(spec, seed),
            ModelKind::BaselineCnn2d => Self::build_baseline_cnn2d(spec, seed),
        }
    }

    pub fn build_spatiotemporal(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.model_kind != ModelKind::SpatiotemporalLstm {
            return Err(Error::Config("build_spatiotemporal needs model_kind spatiotemporal_lstm".into()));
        }
        Self::assemble(spec, Some(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn build_baseline_cnn2d(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.model_kind != ModelKind::BaselineCnn2d {
            return Err(Error::Config("build_baseline_cnn2d needs model_kind baseline_cnn2d".into()));
        }
        Self::assemble(spec, Some(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Zero-initialized model with the right shapes, filled by checkpoint
    /// loading.
    pub(crate) fn skeleton(spec: &NetworkSpec) -> Result<Self> {
        Self::assemble(spec, None::<&mut ChaCha8Rng>)
    }

    fn assemble<R: Rng>(spec: &NetworkSpec, mut rng: Option<&mut R>) -> Result<Self> {
        spec.validate()?;
        let (h, w) = spec.spatial();
        let (body, flat) = match spec.model_kind {
            ModelKind::SpatiotemporalLstm => {
                let mut cells = Vec::new();
                let mut norms = Vec::new();
                let mut cin = spec.channels();
                for &f in &spec.conv_lstm_filters {
                    let mut cell = match rng.as_mut() {
                        Some(r) => ConvLstmParams::init(cin, f, spec.conv_lstm_kernel, (h, w), r),
                        None => ConvLstmParams::zeros(cin, f, spec.conv_lstm_kernel, (h, w)),
                    };
                    cell.cell_update = spec.cell_update;
                    cells.push(cell);
                    norms.push(BatchNormParams::new(f));
                    cin = f;
                }
                let k = spec.conv3d_kernel;
                let cs = ConvSpec::conv3d(cin, spec.conv3d_filters, (k, k, k), (1, 1, 1), Padding::Same);
                let conv3d = ConvLayer::new(cs, rng.as_mut());
                (Body::Spatiotemporal { cells, norms, conv3d }, spec.conv3d_filters * h * w)
            }
            ModelKind::BaselineCnn2d => {
                let geometry = baseline_geometry(spec);
                let convs = geometry.iter().map(|(cs, _)| ConvLayer::new(*cs, rng.as_mut())).collect();
                let (cs, (oh, ow)) = geometry.last().expect("baseline has layers");
                (Body::Baseline { convs }, cs.out_channels * oh * ow)
            }
        };
        let fc1 = DenseLayer::new(spec.dense_hidden, flat, rng.as_mut());
        let fc2 = DenseLayer::new(1, spec.dense_hidden, rng.as_mut());
        Ok(Self { spec: spec.clone(), body, fc1, fc2 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn body(&self) -> &Body<S> {
        &self.body
    }

    /// Learnable tensors with stable names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        match &self.body {
            Body::Spatiotemporal { cells, norms, conv3d } => {
                for (l, (cell, bn)) in cells.iter().zip(norms).enumerate() {
                    for (name, t) in crate::layers::conv_lstm::PARAM_NAMES.iter().zip(cell.tensors()) {
                        out.push((format!("convlstm{l}.{name}"), t));
                    }
                    out.push((format!("bn{l}.gamma"), &bn.gamma));
                    out.push((format!("bn{l}.beta"), &bn.beta));
                }
                out.push(("conv3d.weight".into(), &conv3d.weight));
                out.push(("conv3d.bias".into(), &conv3d.bias));
            }
            Body::Baseline { convs } => {
                for (l, c) in convs.iter().enumerate() {
                    out.push((format!("conv{l}.weight"), &c.weight));
                    out.push((format!("conv{l}.bias"), &c.bias));
                }
            }
        }
        out.push(("fc1.weight".into(), &self.fc1.weight));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), &self.fc2.weight));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Spatiotemporal { cells, norms, conv3d } => {
                for (l, (cell, bn)) in cells.iter_mut().zip(norms.iter_mut()).enumerate() {
                    for (name, t) in crate::layers::conv_lstm::PARAM_NAMES.iter().zip(cell.tensors_mut()) {
                        out.push((format!("convlstm{l}.{name}"), t));
                    }
                    out.push((format!("bn{l}.gamma"), &mut bn.gamma));
                    out.push((format!("bn{l}.beta"), &mut bn.beta));
                }
                out.push(("conv3d.weight".into(), &mut conv3d.weight));
                out.push(("conv3d.bias".into(), &mut conv3d.bias));
            }
            Body::Baseline { convs } => {
                for (l, c) in convs.iter_mut().enumerate() {
                    out.push((format!("conv{l}.weight"), &mut c.weight));
                    out.push((format!("conv{l}.bias"), &mut c.bias));
                }
            }
        }
        out.push(("fc1.weight".into(), &mut self.fc1.weight));
        out.push(("fc1.bias".into(), &mut self.fc1.bias));
        out.push(("fc2.weight".into(), &mut self.fc2.weight));
        out.push(("fc2.bias".into(), &mut self.fc2.bias));
        out
    }

    /// Batch-norm layers, in layer order (empty for the baseline).
    pub fn norms(&self) -> &[BatchNormParams<S>] {
        match &self.body {
            Body::Spatiotemporal { norms, .. } => norms,
            Body::Baseline { .. } => &[],
        }
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormParams<S>] {
        match &mut self.body {
            Body::Spatiotemporal { norms, .. } => norms,
            Body::Baseline { .. } => &mut [],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every tensor (and running statistic) to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut out = Model::<T>::skeleton(&self.spec).expect("spec already validated");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        for (dst, src) in out.norms_mut().iter_mut().zip(self.norms()) {
            dst.running_mean = src.running_mean.cast();
            dst.running_var = src.running_var.cast();
            dst.epsilon = src.epsilon;
            dst.momentum = src.momentum;
            dst.updates = src.updates;
        }
        out
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<usize> {
        let expected = self.spec.input_shape;
        if batch.ndim() != 5 || batch.shape()[1..] != expected {
            return Err(Error::dim("Model::forward", "batch", format!("(m, {expected:?})"), format!("{:?}", batch.shape())));
        }
        Ok(batch.shape()[0])
    }

    /// Runs the network on a (m,T,C,H,W) batch. Train mode uses batch
    /// statistics and dropout driven by `rng`; infer mode is deterministic.
    pub fn forward<R: Rng>(&self, batch: &Tensor<S>, mode: Mode, rng: &mut R) -> Result<(Vec<S>, ForwardCache<S>)> {
        let m = self.check_batch(batch)?;
        if mode == Mode::Train && m < 2 {
            return Err(Error::Config(format!("train-mode forward needs at least 2 samples, got {m}")));
        }
        let train = mode == Mode::Train;
        let (flat, body_cache) = match &self.body {
            Body::Spatiotemporal { cells, norms, conv3d } => self.spatiotemporal_body(cells, norms, conv3d, batch, train)?,
            Body::Baseline { convs } => self.baseline_body(convs, batch, train)?,
        };
        let slope = self.spec.leaky_slope;
        let pre1 = dense_batch(&flat, &self.fc1.weight, &self.fc1.bias)?;
        let act = leaky_relu(&pre1, slope);
        let (dropped, mask) = if train {
            dropout_train(&act, self.spec.dropout_rate, rng)?
        } else {
            let ones = Tensor::ones(act.shape());
            (act, ones)
        };
        let out = dense_batch(&dropped, &self.fc2.weight, &self.fc2.bias)?;
        let preds = out.into_data();
        let cache = ForwardCache {
            mode,
            batch: m,
            train: train.then(|| TrainCache { body: body_cache.expect("train mode"), flat, pre1, mask, fc2_in: dropped }),
        };
        Ok((preds, cache))
    }

    /// Infer-mode predictions in training units.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<S>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, Mode::Infer, &mut unused)?.0)
    }

    /// Infer-mode predictions in degrees.
    pub fn predict_degrees(&self, batch: &Tensor<S>) -> Result<Vec<f64>> {
        Ok(self.predict(batch)?.into_iter().map(|v| v.as_f64() * LABEL_SCALE).collect())
    }

    #[allow(clippy::type_complexity)]
    fn spatiotemporal_body(
        &self,
        cells: &[ConvLstmParams<S>],
        norms: &[BatchNormParams<S>],
        conv3d: &ConvLayer<S>,
        batch: &Tensor<S>,
        train: bool,
    ) -> Result<(Tensor<S>, Option<BodyCache<S>>)> {
        let m = batch.shape()[0];
        let (t_n, _, h, w) = (self.spec.frames(), self.spec.channels(), self.spec.spatial().0, self.spec.spatial().1);
        let mut x = batch.clone();
        let mut lstm_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut stats = Vec::new();
        for (cell, bn) in cells.iter().zip(norms) {
            let f = cell.filters();
            let init = ConvLstmState::zeros(f, h, w);
            let per_sample: Vec<(Tensor<S>, SequenceCache<S>)> = (0..m)
                .into_par_iter()
                .map(|s| conv_lstm_forward_sequence_cached(&x.slice_outer(s), cell, &init))
                .collect::<Result<_>>()?;
            let mut seq = Vec::with_capacity(m * t_n * f * h * w);
            let mut caches = Vec::with_capacity(m);
            for (out, cache) in per_sample {
                seq.extend_from_slice(out.data());
                caches.push(cache);
            }
            let seq = Tensor::from_vec(&[m, t_n, f, h, w], seq)?;
            x = if train {
                let (y, cache, st) = batch_norm_train(&seq, 2, bn)?;
                bn_caches.push(cache);
                stats.push(st);
                lstm_caches.push(caches);
                y
            } else {
                batch_norm_infer(&seq, 2, bn)?
            };
        }
        let f = cells.last().expect("four layers").filters();
        let plan = ConvPlan::new(conv3d.spec, [t_n, h, w])?;
        let per_sample: Vec<(Vec<S>, Vec<S>)> = (0..m)
            .into_par_iter()
            .map(|s| {
                let sample = x.slice_outer(s);
                let cthw = swap_leading(sample.data(), t_n, f, h * w);
                let mut out = vec![S::zero(); plan.output_len()];
                plan.forward(ConvKernel::Im2col, &cthw, conv3d.weight.data(), Some(conv3d.bias.data()), &mut out, false);
                (cthw, out)
            })
            .collect();
        let flat_len = plan.output_len();
        let mut flat = Vec::with_capacity(m * flat_len);
        let mut inputs = Vec::with_capacity(m);
        for (cthw, out) in per_sample {
            flat.extend_from_slice(&out);
            inputs.push(cthw);
        }
        let flat = Tensor::from_vec(&[m, flat_len], flat)?;
        let cache = train.then_some(BodyCache::Spatiotemporal { lstm: lstm_caches, bn: bn_caches, stats, conv3d_inputs: inputs });
        Ok((flat, cache))
    }

    fn baseline_plans(&self, convs: &[ConvLayer<S>]) -> Result<Vec<ConvPlan>> {
        let (mut h, mut w) = self.spec.spatial();
        convs
            .iter()
            .map(|c| {
                let plan = ConvPlan::new(c.spec, [1, h, w])?;
                h = plan.output[1];
                w = plan.output[2];
                Ok(plan)
            })
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn baseline_body(&self, convs: &[ConvLayer<S>], batch: &Tensor<S>, train: bool) -> Result<(Tensor<S>, Option<BodyCache<S>>)> {
        let m = batch.shape()[0];
        let last = self.spec.frames() - 1;
        let slope = self.spec.leaky_slope;
        let plans = self.baseline_plans(convs)?;
        let per_sample: Vec<(Vec<Vec<S>>, Vec<Vec<S>>, Vec<S>)> = (0..m)
            .into_par_iter()
            .map(|s| {
                let mut x = batch.slice_outer(s).slice_outer(last).into_data();
                let mut inputs = Vec::with_capacity(convs.len());
                let mut pres = Vec::with_capacity(convs.len());
                for (conv, plan) in convs.iter().zip(&plans) {
                    let mut pre = vec![S::zero(); plan.output_len()];
                    plan.forward(ConvKernel::Im2col, &x, conv.weight.data(), Some(conv.bias.data()), &mut pre, false);
                    let s = S::lit(slope);
                    let act = pre.iter().map(|&v| if v >= S::zero() { v } else { s * v }).collect();
                    inputs.push(std::mem::replace(&mut x, act));
                    pres.push(pre);
                }
                (inputs, pres, x)
            })
            .collect();
        let flat_len = plans.last().expect("layers").output_len();
        let mut flat = Vec::with_capacity(m * flat_len);
        let mut inputs = Vec::with_capacity(m);
        let mut pres = Vec::with_capacity(m);
        for (i, p, out) in per_sample {
            flat.extend_from_slice(&out);
            inputs.push(i);
            pres.push(p);
        }
        let cache = train.then_some(BodyCache::Baseline { inputs, pres });
        Ok((Tensor::from_vec(&[m, flat_len], flat)?, cache))
    }

    /// Folds the batch statistics recorded by a train-mode forward into the
    /// running statistics.
    pub fn apply_batch_stats(&mut self, cache: &ForwardCache<S>) {
        if let Some(TrainCache { body: BodyCache::Spatiotemporal { stats, .. }, .. }) = &cache.train {
            for (bn, st) in self.norms_mut().iter_mut().zip(stats) {
                bn.update_running(st);
            }
        }
    }

    /// Gradients of `Σ_i grad_predictions[i] · prediction_i` for every
    /// parameter. Requires a train-mode cache.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_predictions: &[S]) -> Result<Gradients<S>> {
        let tc = match (&cache.mode, &cache.train) {
            (Mode::Train, Some(tc)) => tc,
            _ => return Err(Error::Usage("backward needs the cache of a train-mode forward".into())),
        };
        if grad_predictions.len() != cache.batch {
            return Err(Error::dim("Model::backward", "grad_predictions", cache.batch, grad_predictions.len()));
        }
        let m = cache.batch;
        let slope = self.spec.leaky_slope;
        let g_out = Tensor::from_vec(&[m, 1], grad_predictions.to_vec())?;
        let fc2 = dense_backward(&tc.fc2_in, &self.fc2.weight, &g_out)?;
        let g_act = dropout_backward(&tc.mask, &fc2.input)?;
        let g_pre1 = leaky_relu_backward(&tc.pre1, &g_act, slope)?;
        let fc1 = dense_backward(&tc.flat, &self.fc1.weight, &g_pre1)?;
        let mut entries = match (&self.body, &tc.body) {
            (Body::Spatiotemporal { cells, norms, conv3d }, BodyCache::Spatiotemporal { lstm, bn, conv3d_inputs, .. }) => {
                self.spatiotemporal_backward(cells, norms, conv3d, lstm, bn, conv3d_inputs, &fc1.input)?
            }
            (Body::Baseline { convs }, BodyCache::Baseline { inputs, pres }) => {
                self.baseline_backward(convs, inputs, pres, &fc1.input)?
            }
            _ => return Err(Error::Usage("cache does not belong to this model kind".into())),
        };
        entries.push(("fc1.weight".into(), fc1.weights));
        entries.push(("fc1.bias".into(), fc1.bias));
        entries.push(("fc2.weight".into(), fc2.weights));
        entries.push(("fc2.bias".into(), fc2.bias));
        Ok(Gradients { entries })
    }

    #[allow(clippy::too_many_arguments)]
    fn spatiotemporal_backward(
        &self,
        cells: &[ConvLstmParams<S>],
        norms: &[BatchNormParams<S>],
        conv3d: &ConvLayer<S>,
        lstm: &[Vec<SequenceCache<S>>],
        bn: &[BatchNormCache<S>],
        conv3d_inputs: &[Vec<S>],
        g_flat: &Tensor<S>,
    ) -> Result<Vec<(String, Tensor<S>)>> {
        let m = conv3d_inputs.len();
        let (t_n, h, w) = (self.spec.frames(), self.spec.spatial().0, self.spec.spatial().1);
        let f_last = cells.last().expect("layers").filters();
        let plan = ConvPlan::new(conv3d.spec, [t_n, h, w])?;
        let flat_len = plan.output_len();
        let per_sample: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..m)
            .into_par_iter()
            .map(|s| {
                let mut gk = vec![S::zero(); conv3d.weight.len()];
                let mut gb = vec![S::zero(); conv3d.bias.len()];
                let mut gi = vec![S::zero(); conv3d_inputs[s].len()];
                let gout = &g_flat.data()[s * flat_len..(s + 1) * flat_len];
                plan.backward(ConvKernel::Im2col, &conv3d_inputs[s], conv3d.weight.data(), gout, &mut gk, Some(&mut gb), Some(&mut gi));
                (gk, gb, swap_leading(&gi, f_last, t_n, h * w))
            })
            .collect();
        let mut g3k = vec![S::zero(); conv3d.weight.len()];
        let mut g3b = vec![S::zero(); conv3d.bias.len()];
        let mut g_seq = Vec::with_capacity(m * t_n * f_last * h * w);
        for (gk, gb, gi) in per_sample {
            for (a, b) in g3k.iter_mut().zip(&gk) {
                *a += *b;
            }
            for (a, b) in g3b.iter_mut().zip(&gb) {
                *a += *b;
            }
            g_seq.extend_from_slice(&gi);
        }
        let mut g_x = Tensor::from_vec(&[m, t_n, f_last, h, w], g_seq)?;
        let mut layer_entries: Vec<Vec<(String, Tensor<S>)>> = Vec::with_capacity(cells.len());
        for l in (0..cells.len()).rev() {
            let (g_seq, g_gamma, g_beta) = batch_norm_backward(&bn[l], &norms[l], &g_x)?;
            let cell = &cells[l];
            let need_input = l > 0;
            let per_sample = (0..m)
                .into_par_iter()
                .map(|s| conv_lstm_backward_sequence(&lstm[l][s], cell, &g_seq.slice_outer(s), need_input, false))
                .collect::<Result<Vec<_>>>()?;
            let mut acc = cell.zeros_like();
            let mut g_in = Vec::new();
            for g in per_sample {
                for (a, b) in acc.tensors_mut().into_iter().zip(g.params.tensors()) {
                    a.add_assign(b)?;
                }
                if let Some(gi) = g.input {
                    g_in.extend_from_slice(gi.data());
                }
            }
            let mut entries: Vec<(String, Tensor<S>)> = crate::layers::conv_lstm::PARAM_NAMES
                .iter()
                .zip(acc.tensors())
                .map(|(n, t)| (format!("convlstm{l}.{n}"), t.clone()))
                .collect();
            entries.push((format!("bn{l}.gamma"), g_gamma));
            entries.push((format!("bn{l}.beta"), g_beta));
            layer_entries.push(entries);
            if need_input {
                let cin = cell.in_channels();
                g_x = Tensor::from_vec(&[m, t_n, cin, h, w], g_in)?;
            }
        }
        let mut out: Vec<(String, Tensor<S>)> = layer_entries.into_iter().rev().flatten().collect();
        out.push(("conv3d.weight".into(), Tensor::from_vec(conv3d.weight.shape(), g3k)?));
        out.push(("conv3d.bias".into(), Tensor::from_vec(conv3d.bias.shape(), g3b)?));
        Ok(out)
    }

    fn baseline_backward(
        &self,
        convs: &[ConvLayer<S>],
        inputs: &[Vec<Vec<S>>],
        pres: &[Vec<Vec<S>>],
        g_flat: &Tensor<S>,
    ) -> Result<Vec<(String, Tensor<S>)>> {
        let m = inputs.len();
        let plans = self.baseline_plans(convs)?;
        let slope = S::lit(self.spec.leaky_slope);
        let flat_len = plans.last().expect("layers").output_len();
        let per_sample: Vec<Vec<(Vec<S>, Vec<S>)>> = (0..m)
            .into_par_iter()
            .map(|s| {
                let mut g = g_flat.data()[s * flat_len..(s + 1) * flat_len].to_vec();
                let mut grads = vec![(Vec::new(), Vec::new()); convs.len()];
                for l in (0..convs.len()).rev() {
                    for (gv, &p) in g.iter_mut().zip(&pres[s][l]) {
                        if p < S::zero() {
                            *gv *= slope;
                        }
                    }
                    let mut gk = vec![S::zero(); convs[l].weight.len()];
                    let mut gb = vec![S::zero(); convs[l].bias.len()];
                    let mut gi = (l > 0).then(|| vec![S::zero(); plans[l].input_len()]);
                    plans[l].backward(ConvKernel::Im2col, &inputs[s][l], convs[l].weight.data(), &g, &mut gk, Some(&mut gb), gi.as_deref_mut());
                    grads[l] = (gk, gb);
                    if let Some(gi) = gi {
                        g = gi;
                    }
                }
                grads
            })
            .collect();
        let mut out = Vec::with_capacity(2 * convs.len());
        for (l, conv) in convs.iter().enumerate() {
            let mut gk = vec![S::zero(); conv.weight.len()];
            let mut gb = vec![S::zero(); conv.bias.len()];
            for sample in &per_sample {
                for (a, b) in gk.iter_mut().zip(&sample[l].0) {
                    *a += *b;
                }
                for (a, b) in gb.iter_mut().zip(&sample[l].1) {
                    *a += *b;
                }
            }
            out.push((format!("conv{l}.weight"), Tensor::from_vec(conv.weight.shape(), gk)?));
            out.push((format!("conv{l}.bias"), Tensor::from_vec(conv.bias.shape(), gb)?));
        }
        Ok(out)
    }
}

/// State retained by [`Model::forward`] for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<S = f32> {
    mode: Mode,
    batch: usize,
    train: Option<TrainCache<S>>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sign pattern of every LeakyReLU input. Two forwards with equal
    /// patterns lie on the same linear piece of every activation.
    pub fn activation_signs(&self) -> Vec<bool> {
        let Some(tc) = &self.train else { return Vec::new() };
        let mut signs: Vec<bool> = tc.pre1.data().iter().map(|&v| v >= S::zero()).collect();
        if let BodyCache::Baseline { pres, .. } = &tc.body {
            for sample in pres {
                for layer in sample {
                    signs.extend(layer.iter().map(|&v| v >= S::zero()));
                }
            }
        }
        signs
    }

    /// Smallest |LeakyReLU input| seen in this forward.
    pub fn min_activation_margin(&self) -> f64 {
        let Some(tc) = &self.train else { return f64::INFINITY };
        let mut margin = tc.pre1.data().iter().map(|v| v.abs().as_f64()).fold(f64::INFINITY, f64::min);
        if let BodyCache::Baseline { pres, .. } = &tc.body {
            for v in pres.iter().flatten().flatten() {
                margin = margin.min(v.abs().as_f64());
            }
        }
        margin
    }
}

#[derive(Clone, Debug)]
struct TrainCache<S> {
    body: BodyCache<S>,
    flat: Tensor<S>,
    pre1: Tensor<S>,
    mask: Tensor<S>,
    fc2_in: Tensor<S>,
}

#[derive(Clone, Debug)]
enum BodyCache<S> {
    Spatiotemporal {
        lstm: Vec<Vec<SequenceCache<S>>>,
        bn: Vec<BatchNormCache<S>>,
        stats: Vec<BatchStats>,
        conv3d_inputs: Vec<Vec<S>>,
    },
    Baseline {
        inputs: Vec<Vec<Vec<S>>>,
        pres: Vec<Vec<Vec<S>>>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(m: usize, spec: &NetworkSpec, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [t, c, h, w] = spec.input_shape;
        let data = (0..m * t * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[m, t, c, h, w], data).unwrap()
    }

    #[test]
    fn kind_mismatch_is_a_config_error() {
        let spec = NetworkSpec::baseline(8, 8);
        assert!(matches!(Model::<f32>::build_spatiotemporal(&spec, 1), Err(Error::Config(_))));
        let spec = NetworkSpec::spatiotemporal(8, 8);
        assert!(matches!(Model::<f32>::build_baseline_cnn2d(&spec, 1), Err(Error::Config(_))));
        let mut bad = NetworkSpec::spatiotemporal(8, 8);
        bad.input_shape[0] = 4;
        assert!(matches!(Model::<f32>::build(&bad, 1), Err(Error::Config(_))));
        bad = NetworkSpec::spatiotemporal(8, 8);
        bad.conv_lstm_filters[2] = 0;
        assert!(matches!(Model::<f32>::build(&bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::tiny(8, 8);
        assert_eq!(Model::<f32>::build(&spec, 11).unwrap(), Model::<f32>::build(&spec, 11).unwrap());
        assert_ne!(Model::<f32>::build(&spec, 11).unwrap(), Model::<f32>::build(&spec, 12).unwrap());
    }

    #[test]
    fn param_names_are_unique() {
        for spec in [NetworkSpec::tiny(8, 8), NetworkSpec::baseline(16, 16)] {
            let model = Model::<f32>::build(&spec, 0).unwrap();
            let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len());
        }
    }

    #[test]
    fn infer_is_deterministic_and_per_sample() {
        let spec = NetworkSpec::tiny(8, 8);
        let mut model = Model::<f32>::build(&spec, 3).unwrap();
        let batch = random_batch(3, &spec, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = model.forward(&batch, Mode::Train, &mut rng).unwrap();
        model.apply_batch_stats(&cache);
        let a = model.predict(&batch).unwrap();
        assert_eq!(a, model.predict(&batch).unwrap());
        let dup = Tensor::stack(&[batch.slice_outer(1), batch.slice_outer(1)]).unwrap();
        let b = model.predict(&dup).unwrap();
        assert_eq!(b[0], a[1]);
        assert_eq!(b[1], a[1]);
    }

    #[test]
    fn backward_rejects_infer_cache() {
        let spec = NetworkSpec::tiny(8, 8);
        let mut model = Model::<f32>::build(&spec, 3).unwrap();
        let batch = random_batch(2, &spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, train) = model.forward(&batch, Mode::Train, &mut rng).unwrap();
        model.apply_batch_stats(&train);
        let (_, cache) = model.forward(&batch, Mode::Infer, &mut rng).unwrap();
        assert!(matches!(model.backward(&cache, &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn infer_before_any_training_step_is_rejected() {
        let spec = NetworkSpec::tiny(8, 8);
        let model = Model::<f32>::build(&spec, 3).unwrap();
        assert!(matches!(model.predict(&random_batch(2, &spec, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let spec = NetworkSpec::tiny(8, 8);
        let model = Model::<f32>::build(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(model.forward(&random_batch(1, &spec, 1), Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = NetworkSpec::tiny(8, 8);
        let model = Model::<f64>::build(&spec, 5).unwrap();
        let batch = random_batch(3, &spec, 2).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = model.forward(&batch, Mode::Train, &mut rng).unwrap();
        let grads = model.backward(&cache, &[0.0; 3]).unwrap();
        assert_eq!(grads.entries.len(), model.params().len());
        assert!(grads.entries.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }
}
