//! Cross-correlation over (time, height, width) with zero padding.
//!
//! 2D convolution is the 3D engine with a unit temporal axis. Each op has a
//! direct-loop reference kernel and an im2col + GEMM kernel; both share the
//! same geometry so they are interchangeable.

use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar, Trans};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Which implementation executes a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvKernel {
    Naive,
    #[default]
    Im2col,
}

/// Convolution hyperparameters; axes are ordered (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [Padding; 3],
}

const AXES: [&str; 3] = ["time", "height", "width"];

impl ConvSpec {
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [1, kernel.0, kernel.1],
            stride: [1, stride.0, stride.1],
            padding: [Padding::Valid, padding, padding],
        }
    }

    /// Temporal axis is always `valid`; `spatial` applies to height and width.
    pub fn conv3d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        spatial: Padding,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel.0, kernel.1, kernel.2],
            stride: [stride.0, stride.1, stride.2],
            padding: [Padding::Valid, spatial, spatial],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (axis, name) in AXES.iter().enumerate() {
            if self.kernel[axis] == 0 || self.stride[axis] == 0 {
                return Err(Error::Config(format!("{name} kernel and stride must be positive")));
            }
        }
        Ok(())
    }

    /// Output extent along `axis` for an input extent, with the padding
    /// before the first element.
    pub fn output_extent(&self, axis: usize, input: usize) -> Result<(usize, usize)> {
        let (k, s) = (self.kernel[axis], self.stride[axis]);
        match self.padding[axis] {
            Padding::Same => {
                let out = input.div_ceil(s);
                let total = ((out - 1) * s + k).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if input < k {
                    return Err(Error::dim("conv", AXES[axis], format!(">= kernel extent {k}"), input));
                }
                Ok(((input - k) / s + 1, 0))
            }
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Resolved extents for one input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvPlan {
    pub spec: ConvSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvPlan {
    pub fn new(spec: ConvSpec, input: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for axis in 0..3 {
            let (o, p) = spec.output_extent(axis, input[axis])?;
            output[axis] = o;
            pad[axis] = p;
        }
        Ok(Self { spec, input, output, pad })
    }

    pub fn input_len(&self) -> usize {
        self.spec.in_channels * self.input.iter().product::<usize>()
    }

    pub fn output_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.spec.out_channels * self.output_positions()
    }

    pub fn col_rows(&self) -> usize {
        self.spec.in_channels * self.spec.kernel_volume()
    }

    /// Range of output indices along one axis whose source index
    /// `o * stride + k - pad` lies inside `[0, input)`.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, out) = (self.spec.stride[axis], self.pad[axis], self.input[axis], self.output[axis]);
        // o*s + k >= p  =>  o >= ceil((p - k) / s)
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
        let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds receptive fields into a `(C_in·kT·kH·kW) × (T'·H'·W')` matrix.
    pub fn im2col<S: Scalar>(&self, input: &[S], col: &mut [S]) {
        let [kt_n, kh_n, kw_n] = self.spec.kernel;
        let [_, ih_n, iw_n] = self.input;
        let [ot_n, oh_n, ow_n] = self.output;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.pad;
        let positions = self.output_positions();
        let plane = ih_n * iw_n;
        let mut row = 0;
        for c in 0..self.spec.in_channels {
            let chan = &input[c * self.input[0] * plane..];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = self.valid_range(0, kt);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = self.valid_range(1, kh);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = self.valid_range(2, kw);
                        let dst = &mut col[row * positions..(row + 1) * positions];
                        for ot in 0..ot_n {
                            for oh in 0..oh_n {
                                let out_row = &mut dst[(ot * oh_n + oh) * ow_n..(ot * oh_n + oh + 1) * ow_n];
                                if ot < t_lo || ot >= t_hi || oh < h_lo || oh >= h_hi || w_lo >= w_hi {
                                    out_row.fill(S::zero());
                                    continue;
                                }
                                let it = ot * st + kt - pt;
                                let ih = oh * sh + kh - ph;
                                let src = &chan[it * plane + ih * iw_n..];
                                out_row[..w_lo].fill(S::zero());
                                out_row[w_hi..].fill(S::zero());
                                if sw == 1 {
                                    let start = w_lo + kw - pw;
                                    out_row[w_lo..w_hi].copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                                } else {
                                    for ow in w_lo..w_hi {
                                        out_row[ow] = src[ow * sw + kw - pw];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, accumulating.
    pub fn col2im<S: Scalar>(&self, col: &[S], input: &mut [S]) {
        let [kt_n, kh_n, kw_n] = self.spec.kernel;
        let [_, ih_n, iw_n] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.pad;
        let positions = self.output_positions();
        let plane = ih_n * iw_n;
        let mut row = 0;
        for c in 0..self.spec.in_channels {
            let chan = &mut input[c * self.input[0] * plane..(c + 1) * self.input[0] * plane];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = self.valid_range(0, kt);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = self.valid_range(1, kh);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = self.valid_range(2, kw);
                        let src = &col[row * positions..(row + 1) * positions];
                        row += 1;
                        if w_lo >= w_hi {
                            continue;
                        }
                        for ot in t_lo..t_hi {
                            for oh in h_lo..h_hi {
                                let it = ot * st + kt - pt;
                                let ih = oh * sh + kh - ph;
                                let base = it * plane + ih * iw_n;
                                let in_row = &src[(ot * oh_n + oh) * ow_n..(ot * oh_n + oh + 1) * ow_n];
                                for ow in w_lo..w_hi {
                                    chan[base + ow * sw + kw - pw] += in_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out (+)= kernels * input + bias`.
    pub fn forward<S: Scalar>(
        &self,
        kernel: ConvKernel,
        input: &[S],
        kernels: &[S],
        bias: Option<&[S]>,
        out: &mut [S],
        accumulate: bool,
    ) {
        let positions = self.output_positions();
        if !accumulate {
            out.fill(S::zero());
        }
        if let Some(bias) = bias {
            for (co, &b) in bias.iter().enumerate() {
                for v in &mut out[co * positions..(co + 1) * positions] {
                    *v += b;
                }
            }
        }
        match kernel {
            ConvKernel::Im2col => {
                let rows = self.col_rows();
                let mut col = vec![S::zero(); rows * positions];
                self.im2col(input, &mut col);
                gemm(self.spec.out_channels, rows, positions, S::one(), kernels, Trans::No, &col, Trans::No, S::one(), out);
            }
            ConvKernel::Naive => self.forward_naive(input, kernels, out),
        }
    }

    fn source_index(&self, o: [usize; 3], k: [usize; 3]) -> Option<usize> {
        let mut idx = 0;
        for axis in 0..3 {
            let pos = (o[axis] * self.spec.stride[axis] + k[axis]) as isize - self.pad[axis] as isize;
            if pos < 0 || pos as usize >= self.input[axis] {
                return None;
            }
            idx = idx * self.input[axis] + pos as usize;
        }
        Some(idx)
    }

    fn forward_naive<S: Scalar>(&self, input: &[S], kernels: &[S], out: &mut [S]) {
        let spatial_in: usize = self.input.iter().product();
        let kvol = self.spec.kernel_volume();
        let [ot_n, oh_n, ow_n] = self.output;
        let [kt_n, kh_n, kw_n] = self.spec.kernel;
        for co in 0..self.spec.out_channels {
            for ot in 0..ot_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let mut acc = S::zero();
                        for ci in 0..self.spec.in_channels {
                            for kt in 0..kt_n {
                                for kh in 0..kh_n {
                                    for kw in 0..kw_n {
                                        if let Some(src) = self.source_index([ot, oh, ow], [kt, kh, kw]) {
                                            let widx = (co * self.spec.in_channels + ci) * kvol + (kt * kh_n + kh) * kw_n + kw;
                                            acc += kernels[widx] * input[ci * spatial_in + src];
                                        }
                                    }
                                }
                            }
                        }
                        out[((co * ot_n + ot) * oh_n + oh) * ow_n + ow] += acc;
                    }
                }
            }
        }
    }

    /// Accumulates kernel, bias and (optionally) input gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        kernel: ConvKernel,
        input: &[S],
        kernels: &[S],
        grad_out: &[S],
        grad_kernels: &mut [S],
        grad_bias: Option<&mut [S]>,
        grad_input: Option<&mut [S]>,
    ) {
        let positions = self.output_positions();
        if let Some(gb) = grad_bias {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += grad_out[co * positions..(co + 1) * positions].iter().copied().sum::<S>();
            }
        }
        match kernel {
            ConvKernel::Im2col => {
                let rows = self.col_rows();
                let cout = self.spec.out_channels;
                let mut col = vec![S::zero(); rows * positions];
                self.im2col(input, &mut col);
                gemm(cout, positions, rows, S::one(), grad_out, Trans::No, &col, Trans::Yes, S::one(), grad_kernels);
                if let Some(gi) = grad_input {
                    gemm(rows, cout, positions, S::one(), kernels, Trans::Yes, grad_out, Trans::No, S::zero(), &mut col);
                    self.col2im(&col, gi);
                }
            }
            ConvKernel::Naive => self.backward_naive(input, kernels, grad_out, grad_kernels, grad_input),
        }
    }

    fn backward_naive<S: Scalar>(
        &self,
        input: &[S],
        kernels: &[S],
        grad_out: &[S],
        grad_kernels: &mut [S],
        mut grad_input: Option<&mut [S]>,
    ) {
        let spatial_in: usize = self.input.iter().product();
        let kvol = self.spec.kernel_volume();
        let [ot_n, oh_n, ow_n] = self.output;
        let [kt_n, kh_n, kw_n] = self.spec.kernel;
        for co in 0..self.spec.out_channels {
            for ot in 0..ot_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let g = grad_out[((co * ot_n + ot) * oh_n + oh) * ow_n + ow];
                        for ci in 0..self.spec.in_channels {
                            for kt in 0..kt_n {
                                for kh in 0..kh_n {
                                    for kw in 0..kw_n {
                                        if let Some(src) = self.source_index([ot, oh, ow], [kt, kh, kw]) {
                                            let widx = (co * self.spec.in_channels + ci) * kvol + (kt * kh_n + kh) * kw_n + kw;
                                            grad_kernels[widx] += g * input[ci * spatial_in + src];
                                            if let Some(gi) = grad_input.as_deref_mut() {
                                                gi[ci * spatial_in + src] += g * kernels[widx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Input, kernel and bias gradients of one convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<S = f32> {
    pub input: Tensor<S>,
    pub kernels: Tensor<S>,
    pub bias: Tensor<S>,
}

fn check_axis(context: &'static str, axis: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::dim(context, axis, expected, found));
    }
    Ok(())
}

/// Validates operand shapes and resolves the plan. `temporal` selects the
/// (C,T,H,W) layout; otherwise inputs are (C,H,W).
fn plan_for<S: Scalar>(
    context: &'static str,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    spec: &ConvSpec,
    temporal: bool,
) -> Result<ConvPlan> {
    let rank = if temporal { 4 } else { 3 };
    check_axis(context, "input rank", rank, input.ndim())?;
    check_axis(context, "kernel rank", rank + 1, kernels.ndim())?;
    let s = input.shape();
    let k = kernels.shape();
    check_axis(context, "input channels", spec.in_channels, s[0])?;
    check_axis(context, "kernel out_channels", spec.out_channels, k[0])?;
    check_axis(context, "kernel in_channels", spec.in_channels, k[1])?;
    let extents = if temporal { [s[1], s[2], s[3]] } else { [1, s[1], s[2]] };
    let kext = if temporal { [k[2], k[3], k[4]] } else { [1, k[2], k[3]] };
    for axis in 0..3 {
        check_axis(context, &format!("kernel {}", AXES[axis]), spec.kernel[axis], kext[axis])?;
    }
    ConvPlan::new(*spec, extents)
}

fn out_shape(plan: &ConvPlan, temporal: bool) -> Vec<usize> {
    let [t, h, w] = plan.output;
    if temporal {
        vec![plan.spec.out_channels, t, h, w]
    } else {
        vec![plan.spec.out_channels, h, w]
    }
}

fn conv_forward<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
    temporal: bool,
    context: &'static str,
) -> Result<Tensor<S>> {
    let plan = plan_for(context, input, kernels, spec, temporal)?;
    check_axis(context, "bias", spec.out_channels, bias.len())?;
    let mut out = vec![S::zero(); plan.output_len()];
    plan.forward(kernel, input.data(), kernels.data(), Some(bias.data()), &mut out, false);
    Tensor::from_vec(&out_shape(&plan, temporal), out)
}

fn conv_backward<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_output: &Tensor<S>,
    spec: &ConvSpec,
    temporal: bool,
    context: &'static str,
) -> Result<ConvGrads<S>> {
    let plan = plan_for(context, input, kernels, spec, temporal)?;
    let expected = out_shape(&plan, temporal);
    if grad_output.shape() != expected.as_slice() {
        return Err(Error::dim(context, "grad_output", format!("{expected:?}"), format!("{:?}", grad_output.shape())));
    }
    let mut gi = vec![S::zero(); input.len()];
    let mut gk = vec![S::zero(); kernels.len()];
    let mut gb = vec![S::zero(); spec.out_channels];
    plan.backward(kernel, input.data(), kernels.data(), grad_output.data(), &mut gk, Some(&mut gb), Some(&mut gi));
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gi)?,
        kernels: Tensor::from_vec(kernels.shape(), gk)?,
        bias: Tensor::from_vec(&[spec.out_channels], gb)?,
    })
}

/// 2D cross-correlation of a (C_in,H,W) input with (C_out,C_in,kH,kW) kernels.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>, bias: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    conv2d_with(ConvKernel::default(), input, kernels, bias, spec)
}

pub fn conv2d_with<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    conv_forward(kernel, input, kernels, bias, spec, false, "conv2d")
}

/// 3D cross-correlation of a (C_in,T,H,W) input with (C_out,C_in,kT,kH,kW)
/// kernels.
pub fn conv3d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>, bias: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    conv3d_with(ConvKernel::default(), input, kernels, bias, spec)
}

pub fn conv3d_with<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    conv_forward(kernel, input, kernels, bias, spec, true, "conv3d")
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_output: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    conv2d_backward_with(ConvKernel::default(), input, kernels, grad_output, spec)
}

pub fn conv2d_backward_with<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_output: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    conv_backward(kernel, input, kernels, grad_output, spec, false, "conv2d_backward")
}

pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_output: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    conv3d_backward_with(ConvKernel::default(), input, kernels, grad_output, spec)
}

pub fn conv3d_backward_with<S: Scalar>(
    kernel: ConvKernel,
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_output: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    conv_backward(kernel, input, kernels, grad_output, spec, true, "conv3d_backward")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let spec = ConvSpec::conv2d(1, 1, (3, 3), (2, 2), Padding::Same);
        assert_eq!(spec.output_extent(1, 7).unwrap(), (4, 1));
        assert_eq!(spec.output_extent(2, 8).unwrap(), (4, 0));
        let spec = ConvSpec::conv2d(1, 1, (8, 8), (4, 4), Padding::Same);
        assert_eq!(spec.output_extent(1, 32).unwrap(), (8, 2));
    }

    #[test]
    fn valid_padding_requires_room() {
        let spec = ConvSpec::conv3d(1, 1, (3, 3, 3), (1, 1, 1), Padding::Same);
        assert_eq!(spec.output_extent(0, 3).unwrap(), (1, 0));
        let err = spec.output_extent(0, 2).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 4], (0..12).map(|v| v as f64 - 3.5).collect()).unwrap();
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec::conv2d(1, 1, (1, 1), (1, 1), Padding::Same);
        for kernel in [ConvKernel::Naive, ConvKernel::Im2col] {
            assert_eq!(conv2d_with(kernel, &x, &k, &b, &spec).unwrap(), x);
        }
        let g = conv2d_backward(&x, &k, &x, &spec).unwrap();
        assert_eq!(g.input, x);
    }

    #[test]
    fn zero_kernels_broadcast_bias() {
        let x = Tensor::<f32>::full(&[2, 5, 5], 3.0);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let spec = ConvSpec::conv2d(2, 3, (3, 3), (1, 1), Padding::Same);
        let y = conv2d(&x, &k, &b, &spec).unwrap();
        for c in 0..3 {
            assert!(y.slice_outer(c).data().iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn zero_input_conv3d_broadcasts_bias() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let k = Tensor::full(&[2, 2, 3, 3, 3], 0.7);
        let b = Tensor::from_vec(&[2], vec![1.25, -0.5]).unwrap();
        let spec = ConvSpec::conv3d(2, 2, (3, 3, 3), (1, 1, 1), Padding::Same);
        let y = conv3d(&x, &k, &b, &spec).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 4]);
        assert!(y.slice_outer(0).data().iter().all(|&v| v == 1.25));
        assert!(y.slice_outer(1).data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::<f64>::full(&[2, 4, 4], 0.3);
        let k = Tensor::full(&[2, 2, 3, 3], -0.1);
        let spec = ConvSpec::conv2d(2, 2, (3, 3), (1, 1), Padding::Same);
        let g = conv2d_backward(&x, &k, &Tensor::zeros(&[2, 4, 4]), &spec).unwrap();
        assert!(g.input.data().iter().chain(g.kernels.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn mismatches_name_the_axis() {
        let x = Tensor::<f32>::zeros(&[3, 5, 5]);
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec::conv2d(2, 1, (3, 3), (1, 1), Padding::Same);
        let err = conv2d(&x, &k, &b, &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let spec3 = ConvSpec::conv3d(2, 1, (3, 3, 3), (1, 1, 1), Padding::Same);
        let x3 = Tensor::<f32>::zeros(&[2, 2, 5, 5]);
        let k3 = Tensor::zeros(&[1, 2, 3, 3, 3]);
        let err = conv3d(&x3, &k3, &b, &spec3).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
        let err = conv2d_backward(&Tensor::<f32>::zeros(&[2, 5, 5]), &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 4, 4]), &spec)
            .unwrap_err();
        assert!(err.to_string().contains("grad_output"), "{err}");
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for strided, padded geometry.
        let spec = ConvSpec::conv3d(2, 1, (2, 3, 4), (1, 2, 3), Padding::Same);
        let plan = ConvPlan::new(spec, [3, 5, 7]).unwrap();
        let x: Vec<f64> = (0..plan.input_len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let n = plan.col_rows() * plan.output_positions();
        let y: Vec<f64> = (0..n).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let mut col = vec![0.0; n];
        plan.im2col(&x, &mut col);
        let mut back = vec![0.0; plan.input_len()];
        plan.col2im(&y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
