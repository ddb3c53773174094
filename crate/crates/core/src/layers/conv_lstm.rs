//! Convolutional LSTM cell with peephole connections.
//!
//! Gates are computed from two same-padded, stride-1 convolutions (input and
//! previous hidden state) plus Hadamard peepholes on the cell state:
//!
//! ```text
//! i = σ(W_xi*X + W_hi*H' + W_ci∘C' + b_i)
//! f = σ(W_xf*X + W_hf*H' + W_cf∘C' + b_f)
//! C = f∘C' + i∘tanh(W_xc*X + W_hc*H' + b_c)
//! o = σ(W_xo*X + W_ho*H' + W_co∘C + b_o)
//! H = o∘tanh(C)
//! ```
//!
//! [`CellUpdate::Additive`] swaps the cell update for `C = f + i∘tanh(…)`.
//!
//! The four gate convolutions are evaluated as one stacked GEMM per operand;
//! the stacked gate order is (i, f, c, o).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_shape, uniform_fan_in};
use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, ConvKernel, ConvPlan, ConvSpec, Padding, Scalar, Tensor, Trans};

/// Cell-state update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellUpdate {
    /// `C_t = f_t ∘ C_{t-1} + i_t ∘ g_t`
    #[default]
    Standard,
    /// `C_t = f_t + i_t ∘ g_t`; the previous cell only reaches `C_t` through
    /// the gate peepholes.
    Additive,
}

/// Weights of one ConvLSTM layer. Input kernels are (F,C_in,k,k), recurrent
/// kernels (F,F,k,k), biases (F) and peepholes (F,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<S = f32> {
    pub w_xi: Tensor<S>,
    pub w_hi: Tensor<S>,
    pub w_ci: Tensor<S>,
    pub b_i: Tensor<S>,
    pub w_xf: Tensor<S>,
    pub w_hf: Tensor<S>,
    pub w_cf: Tensor<S>,
    pub b_f: Tensor<S>,
    pub w_xc: Tensor<S>,
    pub w_hc: Tensor<S>,
    pub b_c: Tensor<S>,
    pub w_xo: Tensor<S>,
    pub w_ho: Tensor<S>,
    pub w_co: Tensor<S>,
    pub b_o: Tensor<S>,
    pub cell_update: CellUpdate,
}

/// Recurrent state; both tensors are (F,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<S = f32> {
    pub c: Tensor<S>,
    pub h: Tensor<S>,
}

impl<S: Scalar> ConvLstmState<S> {
    pub fn zeros(filters: usize, height: usize, width: usize) -> Self {
        Self { c: Tensor::zeros(&[filters, height, width]), h: Tensor::zeros(&[filters, height, width]) }
    }
}

pub const PARAM_NAMES: [&str; 15] = [
    "w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f", "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "w_co", "b_o",
];

impl<S: Scalar> ConvLstmParams<S> {
    /// All-zero parameters.
    pub fn zeros(in_channels: usize, filters: usize, kernel: usize, spatial: (usize, usize)) -> Self {
        let wx = || Tensor::zeros(&[filters, in_channels, kernel, kernel]);
        let wh = || Tensor::zeros(&[filters, filters, kernel, kernel]);
        let peep = || Tensor::zeros(&[filters, spatial.0, spatial.1]);
        let b = || Tensor::zeros(&[filters]);
        Self {
            w_xi: wx(),
            w_hi: wh(),
            w_ci: peep(),
            b_i: b(),
            w_xf: wx(),
            w_hf: wh(),
            w_cf: peep(),
            b_f: b(),
            w_xc: wx(),
            w_hc: wh(),
            b_c: b(),
            w_xo: wx(),
            w_ho: wh(),
            w_co: peep(),
            b_o: b(),
            cell_update: CellUpdate::Standard,
        }
    }

    /// Kernels uniform in ±1/sqrt(fan_in); peepholes and biases zero except
    /// the forget bias, which starts at 1.
    pub fn init<R: Rng>(in_channels: usize, filters: usize, kernel: usize, spatial: (usize, usize), rng: &mut R) -> Self {
        let mut p = Self::zeros(in_channels, filters, kernel, spatial);
        let fan_x = in_channels * kernel * kernel;
        let fan_h = filters * kernel * kernel;
        for w in [&mut p.w_xi, &mut p.w_xf, &mut p.w_xc, &mut p.w_xo] {
            uniform_fan_in(w, fan_x, rng);
        }
        for w in [&mut p.w_hi, &mut p.w_hf, &mut p.w_hc, &mut p.w_ho] {
            uniform_fan_in(w, fan_h, rng);
        }
        p.b_f = Tensor::ones(&[filters]);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let spatial = (self.w_ci.shape()[1], self.w_ci.shape()[2]);
        let mut z = Self::zeros(self.in_channels(), self.filters(), self.kernel(), spatial);
        z.cell_update = self.cell_update;
        z
    }

    pub fn filters(&self) -> usize {
        self.w_xi.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w_xi.shape()[2]
    }

    /// (F, H, W) of the state this layer operates on.
    pub fn state_shape(&self) -> [usize; 3] {
        let s = self.w_ci.shape();
        [s[0], s[1], s[2]]
    }

    pub fn tensors(&self) -> [&Tensor<S>; 15] {
        [
            &self.w_xi, &self.w_hi, &self.w_ci, &self.b_i, &self.w_xf, &self.w_hf, &self.w_cf, &self.b_f, &self.w_xc,
            &self.w_hc, &self.b_c, &self.w_xo, &self.w_ho, &self.w_co, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 15] {
        [
            &mut self.w_xi,
            &mut self.w_hi,
            &mut self.w_ci,
            &mut self.b_i,
            &mut self.w_xf,
            &mut self.w_hf,
            &mut self.w_cf,
            &mut self.b_f,
            &mut self.w_xc,
            &mut self.w_hc,
            &mut self.b_c,
            &mut self.w_xo,
            &mut self.w_ho,
            &mut self.w_co,
            &mut self.b_o,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let (f, cin, k) = (self.filters(), self.in_channels(), self.kernel());
        let [_, h, w] = self.state_shape();
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            let expected: Vec<usize> = match &name[..3] {
                "w_x" => vec![f, cin, k, k],
                "w_h" => vec![f, f, k, k],
                "w_c" => vec![f, h, w],
                _ => vec![f],
            };
            check_shape("ConvLstmParams", name, &expected, t.shape())?;
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("ConvLSTM kernel must be odd to preserve extents, got {k}")));
        }
        Ok(())
    }

    fn stacked(&self) -> Stacked<S> {
        let cat = |ts: [&Tensor<S>; 4]| ts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<_>>();
        Stacked {
            wx: cat([&self.w_xi, &self.w_xf, &self.w_xc, &self.w_xo]),
            wh: cat([&self.w_hi, &self.w_hf, &self.w_hc, &self.w_ho]),
            bias: cat([&self.b_i, &self.b_f, &self.b_c, &self.b_o]),
        }
    }

    fn plans(&self) -> Result<(ConvPlan, ConvPlan)> {
        let (f, cin, k) = (self.filters(), self.in_channels(), self.kernel());
        let [_, h, w] = self.state_shape();
        let xs = ConvSpec::conv2d(cin, 4 * f, (k, k), (1, 1), Padding::Same);
        let hs = ConvSpec::conv2d(f, 4 * f, (k, k), (1, 1), Padding::Same);
        Ok((ConvPlan::new(xs, [1, h, w])?, ConvPlan::new(hs, [1, h, w])?))
    }
}

struct Stacked<S> {
    wx: Vec<S>,
    wh: Vec<S>,
    bias: Vec<S>,
}

/// Values retained from one step for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache<S = f32> {
    x: Tensor<S>,
    prev: ConvLstmState<S>,
    input_gate: Vec<S>,
    forget_gate: Vec<S>,
    candidate: Vec<S>,
    output_gate: Vec<S>,
    cell: Vec<S>,
    tanh_cell: Vec<S>,
}

impl<S: Scalar> StepCache<S> {
    /// Gate activations (i, f, o) of this step, each (F·H·W) flat.
    pub fn gates(&self) -> [&[S]; 3] {
        [&self.input_gate, &self.forget_gate, &self.output_gate]
    }
}

struct Prepared<S> {
    stacked: Stacked<S>,
    x_plan: ConvPlan,
    h_plan: ConvPlan,
}

impl<S: Scalar> Prepared<S> {
    fn new(params: &ConvLstmParams<S>) -> Result<Self> {
        params.validate()?;
        let (x_plan, h_plan) = params.plans()?;
        Ok(Self { stacked: params.stacked(), x_plan, h_plan })
    }
}

fn check_step_inputs<S: Scalar>(x: &Tensor<S>, prev: &ConvLstmState<S>, params: &ConvLstmParams<S>) -> Result<()> {
    let [f, h, w] = params.state_shape();
    check_shape("conv_lstm_step", "x", &[params.in_channels(), h, w], x.shape())?;
    check_shape("conv_lstm_step", "prev.c", &[f, h, w], prev.c.shape())?;
    check_shape("conv_lstm_step", "prev.h", &[f, h, w], prev.h.shape())?;
    Ok(())
}

fn step_impl<S: Scalar>(
    x: &Tensor<S>,
    prev: &ConvLstmState<S>,
    params: &ConvLstmParams<S>,
    prep: &Prepared<S>,
) -> Result<StepCache<S>> {
    let [f, h, w] = params.state_shape();
    let n = f * h * w;
    let mut pre = vec![S::zero(); 4 * n];
    prep.x_plan.forward(ConvKernel::Im2col, x.data(), &prep.stacked.wx, Some(&prep.stacked.bias), &mut pre, false);
    // A zero hidden state contributes exactly zero.
    if prev.h.data().iter().any(|&v| v != S::zero()) {
        prep.h_plan.forward(ConvKernel::Im2col, prev.h.data(), &prep.stacked.wh, None, &mut pre, true);
    }
    let c_prev = prev.c.data();
    let (pre_i, rest) = pre.split_at(n);
    let (pre_f, rest) = rest.split_at(n);
    let (pre_c, pre_o) = rest.split_at(n);
    let (w_ci, w_cf, w_co) = (params.w_ci.data(), params.w_cf.data(), params.w_co.data());

    let mut input_gate = Vec::with_capacity(n);
    let mut forget_gate = Vec::with_capacity(n);
    let mut candidate = Vec::with_capacity(n);
    let mut cell = Vec::with_capacity(n);
    let mut output_gate = Vec::with_capacity(n);
    let mut tanh_cell = Vec::with_capacity(n);
    for j in 0..n {
        let ig = sigmoid(pre_i[j] + w_ci[j] * c_prev[j]);
        let fg = sigmoid(pre_f[j] + w_cf[j] * c_prev[j]);
        let g = pre_c[j].tanh_fast();
        let c = match params.cell_update {
            CellUpdate::Standard => fg * c_prev[j] + ig * g,
            CellUpdate::Additive => fg + ig * g,
        };
        let og = sigmoid(pre_o[j] + w_co[j] * c);
        input_gate.push(ig);
        forget_gate.push(fg);
        candidate.push(g);
        cell.push(c);
        output_gate.push(og);
        tanh_cell.push(c.tanh_fast());
    }
    Ok(StepCache {
        x: x.clone(),
        prev: prev.clone(),
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        cell,
        tanh_cell,
    })
}

impl<S: Scalar> StepCache<S> {
    fn next_state(&self, shape: [usize; 3]) -> ConvLstmState<S> {
        let h = self.output_gate.iter().zip(&self.tanh_cell).map(|(&o, &t)| o * t).collect();
        ConvLstmState {
            c: Tensor::from_vec(&shape, self.cell.clone()).expect("state shape"),
            h: Tensor::from_vec(&shape, h).expect("state shape"),
        }
    }
}

/// One ConvLSTM step. Returns the hidden output and the next state
/// (`out == next.h`).
pub fn conv_lstm_step<S: Scalar>(
    x: &Tensor<S>,
    prev: &ConvLstmState<S>,
    params: &ConvLstmParams<S>,
) -> Result<(Tensor<S>, ConvLstmState<S>)> {
    let (out, next, _) = conv_lstm_step_cached(x, prev, params)?;
    Ok((out, next))
}

/// [`conv_lstm_step`] that also returns the backward cache.
pub fn conv_lstm_step_cached<S: Scalar>(
    x: &Tensor<S>,
    prev: &ConvLstmState<S>,
    params: &ConvLstmParams<S>,
) -> Result<(Tensor<S>, ConvLstmState<S>, StepCache<S>)> {
    check_step_inputs(x, prev, params)?;
    let prep = Prepared::new(params)?;
    let cache = step_impl(x, prev, params, &prep)?;
    let next = cache.next_state(params.state_shape());
    Ok((next.h.clone(), next, cache))
}

/// Cached forward of a whole sequence.
#[derive(Clone, Debug)]
pub struct SequenceCache<S = f32> {
    steps: Vec<StepCache<S>>,
}

impl<S: Scalar> SequenceCache<S> {
    pub fn steps(&self) -> &[StepCache<S>] {
        &self.steps
    }
}

/// Runs the cell over `xs` (T,C_in,H,W) from `init` and stacks every hidden
/// output into (T,F,H,W).
pub fn conv_lstm_forward_sequence<S: Scalar>(
    xs: &Tensor<S>,
    params: &ConvLstmParams<S>,
    init: &ConvLstmState<S>,
) -> Result<Tensor<S>> {
    Ok(conv_lstm_forward_sequence_cached(xs, params, init)?.0)
}

pub fn conv_lstm_forward_sequence_cached<S: Scalar>(
    xs: &Tensor<S>,
    params: &ConvLstmParams<S>,
    init: &ConvLstmState<S>,
) -> Result<(Tensor<S>, SequenceCache<S>)> {
    if xs.ndim() != 4 {
        return Err(Error::dim("conv_lstm_forward_sequence", "xs rank", 4, xs.ndim()));
    }
    let steps_n = xs.shape()[0];
    let shape = params.state_shape();
    let prep = Prepared::new(params)?;
    let mut state = init.clone();
    let mut steps = Vec::with_capacity(steps_n);
    let mut out = Vec::with_capacity(steps_n * shape.iter().product::<usize>());
    for t in 0..steps_n {
        let x = xs.slice_outer(t);
        check_step_inputs(&x, &state, params)?;
        let cache = step_impl(&x, &state, params, &prep)?;
        state = cache.next_state(shape);
        out.extend_from_slice(state.h.data());
        steps.push(cache);
    }
    let out = Tensor::from_vec(&[steps_n, shape[0], shape[1], shape[2]], out)?;
    Ok((out, SequenceCache { steps }))
}

/// Gradients flowing out of a step or a sequence.
#[derive(Clone, Debug)]
pub struct ConvLstmGrads<S = f32> {
    /// Same layout as the input (`x` for a step, `xs` for a sequence);
    /// `None` when not requested.
    pub input: Option<Tensor<S>>,
    /// Gradient with respect to the initial/previous state.
    pub state: Option<ConvLstmState<S>>,
    pub params: ConvLstmParams<S>,
}

struct GradAccum<S> {
    wx: Vec<S>,
    wh: Vec<S>,
    bias: Vec<S>,
    w_ci: Vec<S>,
    w_cf: Vec<S>,
    w_co: Vec<S>,
}

impl<S: Scalar> GradAccum<S> {
    fn new(prep: &Prepared<S>, n: usize) -> Self {
        Self {
            wx: vec![S::zero(); prep.stacked.wx.len()],
            wh: vec![S::zero(); prep.stacked.wh.len()],
            bias: vec![S::zero(); prep.stacked.bias.len()],
            w_ci: vec![S::zero(); n],
            w_cf: vec![S::zero(); n],
            w_co: vec![S::zero(); n],
        }
    }

    fn into_params(self, like: &ConvLstmParams<S>) -> ConvLstmParams<S> {
        let mut g = like.zeros_like();
        let split = |flat: &[S], parts: [&mut Tensor<S>; 4]| {
            let len = parts[0].len();
            for (i, p) in parts.into_iter().enumerate() {
                p.data_mut().copy_from_slice(&flat[i * len..(i + 1) * len]);
            }
        };
        split(&self.wx, [&mut g.w_xi, &mut g.w_xf, &mut g.w_xc, &mut g.w_xo]);
        split(&self.wh, [&mut g.w_hi, &mut g.w_hf, &mut g.w_hc, &mut g.w_ho]);
        split(&self.bias, [&mut g.b_i, &mut g.b_f, &mut g.b_c, &mut g.b_o]);
        g.w_ci.data_mut().copy_from_slice(&self.w_ci);
        g.w_cf.data_mut().copy_from_slice(&self.w_cf);
        g.w_co.data_mut().copy_from_slice(&self.w_co);
        g
    }
}

/// Backpropagates one step given dL/dH_t and the cell gradient carried from
/// step t+1. Accumulates parameter gradients and returns
/// (dL/dX_t, dL/dH_{t-1}, dL/dC_{t-1}) as requested.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
fn step_backward<S: Scalar>(
    cache: &StepCache<S>,
    params: &ConvLstmParams<S>,
    prep: &Prepared<S>,
    grad_h: &[S],
    grad_c_carry: &[S],
    acc: &mut GradAccum<S>,
    need_input: bool,
    need_state: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    let n = grad_h.len();
    let c_prev = cache.prev.c.data();
    let (w_ci, w_cf, w_co) = (params.w_ci.data(), params.w_cf.data(), params.w_co.data());
    let mut dpre = vec![S::zero(); 4 * n];
    let mut dc_prev = vec![S::zero(); n];
    {
        let (dpi, rest) = dpre.split_at_mut(n);
        let (dpf, rest) = rest.split_at_mut(n);
        let (dpc, dpo) = rest.split_at_mut(n);
        let one = S::one();
        for j in 0..n {
            let (ig, fg, g, og) = (cache.input_gate[j], cache.forget_gate[j], cache.candidate[j], cache.output_gate[j]);
            let (c, tc) = (cache.cell[j], cache.tanh_cell[j]);
            let d_o = grad_h[j] * tc;
            let d_pre_o = d_o * og * (one - og);
            let dc = grad_c_carry[j] + grad_h[j] * og * (one - tc * tc) + d_pre_o * w_co[j];
            acc.w_co[j] += d_pre_o * c;
            let d_f = match params.cell_update {
                CellUpdate::Standard => {
                    dc_prev[j] = dc * fg;
                    dc * c_prev[j]
                }
                CellUpdate::Additive => dc,
            };
            let d_i = dc * g;
            let d_g = dc * ig;
            let d_pre_i = d_i * ig * (one - ig);
            let d_pre_f = d_f * fg * (one - fg);
            dc_prev[j] += d_pre_i * w_ci[j] + d_pre_f * w_cf[j];
            acc.w_ci[j] += d_pre_i * c_prev[j];
            acc.w_cf[j] += d_pre_f * c_prev[j];
            dpi[j] = d_pre_i;
            dpf[j] = d_pre_f;
            dpc[j] = d_g * (one - g * g);
            dpo[j] = d_pre_o;
        }
    }
    let mut dx = need_input.then(|| vec![S::zero(); cache.x.len()]);
    prep.x_plan.backward(
        ConvKernel::Im2col,
        cache.x.data(),
        &prep.stacked.wx,
        &dpre,
        &mut acc.wx,
        Some(&mut acc.bias),
        dx.as_deref_mut(),
    );
    let h_nonzero = cache.prev.h.data().iter().any(|&v| v != S::zero());
    let mut dh_prev = need_state.then(|| vec![S::zero(); n]);
    if h_nonzero {
        prep.h_plan.backward(ConvKernel::Im2col, cache.prev.h.data(), &prep.stacked.wh, &dpre, &mut acc.wh, None, dh_prev.as_deref_mut());
    } else if let Some(dh) = dh_prev.as_deref_mut() {
        // Weight gradient is zero for a zero state, the input gradient is not.
        let positions = prep.h_plan.output_positions();
        let mut col = vec![S::zero(); prep.h_plan.col_rows() * positions];
        gemm(prep.h_plan.col_rows(), 4 * params.filters(), positions, S::one(), &prep.stacked.wh, Trans::Yes, &dpre, Trans::No, S::zero(), &mut col);
        prep.h_plan.col2im(&col, dh);
    }
    (dx, dh_prev, dc_prev)
}

/// Backward of a single step with upstream gradients for H_t and C_t.
pub fn conv_lstm_step_backward<S: Scalar>(
    cache: &StepCache<S>,
    params: &ConvLstmParams<S>,
    grad_h: &Tensor<S>,
    grad_c: Option<&Tensor<S>>,
) -> Result<ConvLstmGrads<S>> {
    let shape = params.state_shape();
    check_shape("conv_lstm_step_backward", "grad_h", &shape, grad_h.shape())?;
    check_shape("conv_lstm_step_backward", "cache.x", &[params.in_channels(), shape[1], shape[2]], cache.x.shape())?;
    let prep = Prepared::new(params)?;
    let n = grad_h.len();
    let zero = vec![S::zero(); n];
    let gc = match grad_c {
        Some(g) => {
            check_shape("conv_lstm_step_backward", "grad_c", &shape, g.shape())?;
            g.data()
        }
        None => &zero,
    };
    let mut acc = GradAccum::new(&prep, n);
    let (dx, dh, dc) = step_backward(cache, params, &prep, grad_h.data(), gc, &mut acc, true, true);
    Ok(ConvLstmGrads {
        input: Some(Tensor::from_vec(cache.x.shape(), dx.expect("requested"))?),
        state: Some(ConvLstmState {
            c: Tensor::from_vec(&shape, dc)?,
            h: Tensor::from_vec(&shape, dh.expect("requested"))?,
        }),
        params: acc.into_params(params),
    })
}

/// Backpropagation through time for a cached sequence. `grad_out` is
/// dL/dH_t for every step, shaped (T,F,H,W).
pub fn conv_lstm_backward_sequence<S: Scalar>(
    cache: &SequenceCache<S>,
    params: &ConvLstmParams<S>,
    grad_out: &Tensor<S>,
    need_input: bool,
    need_init: bool,
) -> Result<ConvLstmGrads<S>> {
    let shape = params.state_shape();
    let steps_n = cache.steps.len();
    check_shape("conv_lstm_backward_sequence", "grad_out", &[steps_n, shape[0], shape[1], shape[2]], grad_out.shape())?;
    let prep = Prepared::new(params)?;
    let n: usize = shape.iter().product();
    let mut acc = GradAccum::new(&prep, n);
    let mut grad_h_carry = vec![S::zero(); n];
    let mut grad_c_carry = vec![S::zero(); n];
    let x_len = cache.steps.first().map_or(0, |s| s.x.len());
    let mut dxs = need_input.then(|| vec![S::zero(); steps_n * x_len]);
    for t in (0..steps_n).rev() {
        let mut gh = grad_out.data()[t * n..(t + 1) * n].to_vec();
        for (g, &c) in gh.iter_mut().zip(&grad_h_carry) {
            *g += c;
        }
        let need_state = t > 0 || need_init;
        let (dx, dh, dc) = step_backward(&cache.steps[t], params, &prep, &gh, &grad_c_carry, &mut acc, need_input, need_state);
        if let (Some(all), Some(dx)) = (dxs.as_deref_mut(), dx) {
            all[t * x_len..(t + 1) * x_len].copy_from_slice(&dx);
        }
        grad_h_carry = dh.unwrap_or_else(|| vec![S::zero(); n]);
        grad_c_carry = dc;
    }
    let input = match dxs {
        Some(d) => {
            let mut s = vec![steps_n];
            s.extend_from_slice(cache.steps[0].x.shape());
            Some(Tensor::from_vec(&s, d)?)
        }
        None => None,
    };
    let state = if need_init {
        Some(ConvLstmState { c: Tensor::from_vec(&shape, grad_c_carry)?, h: Tensor::from_vec(&shape, grad_h_carry)? })
    } else {
        None
    };
    Ok(ConvLstmGrads { input, state, params: acc.into_params(params) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_zero_state_gives_half_gates_and_zero_state() {
        let p = ConvLstmParams::<f64>::zeros(2, 3, 3, (4, 5));
        let x = Tensor::full(&[2, 4, 5], 0.7);
        let (out, next, cache) = conv_lstm_step_cached(&x, &ConvLstmState::zeros(3, 4, 5), &p).unwrap();
        for gate in cache.gates() {
            assert!(gate.iter().all(|&g| g == 0.5));
        }
        assert!(next.c.data().iter().all(|&v| v == 0.0));
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out, next.h);
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = ConvLstmParams::<f64>::zeros(1, 2, 3, (3, 3));
        let prev = ConvLstmState { c: Tensor::full(&[2, 3, 3], 1.6), h: Tensor::full(&[2, 3, 3], -0.4) };
        let (_, next) = conv_lstm_step(&Tensor::full(&[1, 3, 3], 2.0), &prev, &p).unwrap();
        assert!(next.c.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        let expected = 0.5 * 0.8f64.tanh();
        assert!(next.h.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn additive_update_drops_previous_cell() {
        let mut p = ConvLstmParams::<f64>::zeros(1, 1, 1, (1, 1));
        p.cell_update = CellUpdate::Additive;
        let prev = ConvLstmState { c: Tensor::full(&[1, 1, 1], 3.0), h: Tensor::zeros(&[1, 1, 1]) };
        let (_, next) = conv_lstm_step(&Tensor::zeros(&[1, 1, 1]), &prev, &p).unwrap();
        // f = 0.5, i·g = 0.5·tanh(0) = 0
        assert_eq!(next.c.data()[0], 0.5);
    }

    #[test]
    fn sequence_equals_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ConvLstmParams::<f64>::init(2, 3, 3, (4, 4), &mut rng);
        p.w_ci = random_tensor(&[3, 4, 4], &mut rng);
        let xs = random_tensor(&[3, 2, 4, 4], &mut rng);
        let init = ConvLstmState { c: random_tensor(&[3, 4, 4], &mut rng), h: random_tensor(&[3, 4, 4], &mut rng) };
        let seq = conv_lstm_forward_sequence(&xs, &p, &init).unwrap();
        let mut state = init;
        for t in 0..3 {
            let (out, next) = conv_lstm_step(&xs.slice_outer(t), &state, &p).unwrap();
            assert_eq!(seq.slice_outer(t), out);
            state = next;
        }
    }

    #[test]
    fn rejects_mismatched_state() {
        let p = ConvLstmParams::<f32>::zeros(1, 2, 3, (4, 4));
        let bad = ConvLstmState::zeros(2, 4, 5);
        let err = conv_lstm_step(&Tensor::zeros(&[1, 4, 4]), &bad, &p).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvLstmParams::<f64>::init(1, 2, 3, (3, 3), &mut rng);
        let xs = random_tensor(&[2, 1, 3, 3], &mut rng);
        let (_, cache) = conv_lstm_forward_sequence_cached(&xs, &p, &ConvLstmState::zeros(2, 3, 3)).unwrap();
        let g = conv_lstm_backward_sequence(&cache, &p, &Tensor::zeros(&[2, 2, 3, 3]), true, true).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }
}
