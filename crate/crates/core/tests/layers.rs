//! Layer-level oracles: ConvLSTM hand evaluations and scalar transcription,
//! batch-norm output statistics, and hidden-state bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlstm::layers::conv_lstm::PARAM_NAMES;
use stlstm::layers::{
    batch_norm_infer, batch_norm_train, conv_lstm_backward_sequence, conv_lstm_forward_sequence,
    conv_lstm_forward_sequence_cached, conv_lstm_step, BatchNormParams, ConvLstmParams, ConvLstmState,
};
use stlstm::tensor::{conv2d_backward, conv2d_with, conv3d, ConvKernel, ConvSpec, Padding};
use stlstm::Tensor;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn zero_parameters_with_constant_cell_halve_it() {
    for c0 in [-2.0f64, 0.3, 1.7] {
        let p = ConvLstmParams::<f64>::zeros(2, 3, 3, (4, 5));
        let prev = ConvLstmState { c: Tensor::full(&[3, 4, 5], c0), h: Tensor::zeros(&[3, 4, 5]) };
        let x = random(&[2, 4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (h, next) = conv_lstm_step(&x, &prev, &p).unwrap();
        for (&c, &hv) in next.c.data().iter().zip(h.data()) {
            assert!((c - 0.5 * c0).abs() <= 1e-6);
            assert!((hv - 0.5 * (0.5 * c0).tanh()).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_parameters_give_zero_sequence() {
    let p = ConvLstmParams::<f64>::zeros(1, 2, 3, (3, 3));
    let xs = random(&[4, 1, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let out = conv_lstm_forward_sequence(&xs, &p, &ConvLstmState::zeros(2, 3, 3)).unwrap();
    assert_eq!(out.shape(), &[4, 2, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

/// The five cell equations on scalars, for a 1×1 map where only the centre
/// tap of each 3×3 kernel touches real data.
fn scalar_step(p: &ConvLstmParams<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f_n = p.filters();
    let cin = p.in_channels();
    let tap = |w: &Tensor<f64>, f: usize, ch: usize, chans: usize| w.data()[((f * chans + ch) * 3 + 1) * 3 + 1];
    let conv = |wx: &Tensor<f64>, wh: &Tensor<f64>, b: &Tensor<f64>, f: usize| {
        let mut s = b.data()[f];
        for (ch, xv) in x.iter().enumerate() {
            s += tap(wx, f, ch, cin) * xv;
        }
        for (ch, hv) in h.iter().enumerate() {
            s += tap(wh, f, ch, f_n) * hv;
        }
        s
    };
    let mut c_new = vec![0.0; f_n];
    let mut h_new = vec![0.0; f_n];
    for f in 0..f_n {
        let i = sigmoid(conv(&p.w_xi, &p.w_hi, &p.b_i, f) + p.w_ci.data()[f] * c[f]);
        let fg = sigmoid(conv(&p.w_xf, &p.w_hf, &p.b_f, f) + p.w_cf.data()[f] * c[f]);
        c_new[f] = fg * c[f] + i * conv(&p.w_xc, &p.w_hc, &p.b_c, f).tanh();
        let o = sigmoid(conv(&p.w_xo, &p.w_ho, &p.b_o, f) + p.w_co.data()[f] * c_new[f]);
        h_new[f] = o * c_new[f].tanh();
    }
    (h_new, c_new)
}

fn random_params(cin: usize, f: usize, rng: &mut ChaCha8Rng) -> ConvLstmParams<f64> {
    let mut p = ConvLstmParams::<f64>::zeros(cin, f, 3, (1, 1));
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    p
}

#[test]
fn one_by_one_step_matches_scalar_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (cin, f) in [(1, 1), (2, 1), (2, 3)] {
        for _ in 0..10 {
            let p = random_params(cin, f, &mut rng);
            let x = random(&[cin, 1, 1], -1.0, 1.0, &mut rng);
            let prev = ConvLstmState { c: random(&[f, 1, 1], -2.0, 2.0, &mut rng), h: random(&[f, 1, 1], -1.0, 1.0, &mut rng) };
            let (h, next) = conv_lstm_step(&x, &prev, &p).unwrap();
            let (h_ref, c_ref) = scalar_step(&p, x.data(), prev.h.data(), prev.c.data());
            for k in 0..f {
                assert!((h.data()[k] - h_ref[k]).abs() <= 1e-6);
                assert!((next.c.data()[k] - c_ref[k]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn two_step_one_by_one_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_params(1, 1, &mut rng);
    let xs = random(&[2, 1, 1, 1], -1.0, 1.0, &mut rng);
    let init = ConvLstmState { c: random(&[1, 1, 1], -1.0, 1.0, &mut rng), h: random(&[1, 1, 1], -1.0, 1.0, &mut rng) };
    let loss = |p: &ConvLstmParams<f64>| conv_lstm_forward_sequence(&xs, p, &init).unwrap().sum();
    let (_, cache) = conv_lstm_forward_sequence_cached(&xs, &p, &init).unwrap();
    let grads = conv_lstm_backward_sequence(&cache, &p, &Tensor::ones(&[2, 1, 1, 1]), false, false).unwrap();
    let h = 1e-3;
    let analytic = grads.params.tensors();
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            // Only centre taps reach a 1×1 map; the rest must be exactly 0.
            let mut up = p.clone();
            up.tensors_mut()[ti].data_mut()[i] += h;
            let mut down = p.clone();
            down.tensors_mut()[ti].data_mut()[i] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn hidden_state_stays_in_the_open_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ConvLstmParams::<f64>::init(2, 3, 3, (5, 6), &mut rng);
    for t in p.tensors_mut() {
        t.scale_in_place(4.0);
    }
    let xs = random(&[6, 2, 5, 6], -3.0, 3.0, &mut rng);
    let out = conv_lstm_forward_sequence(&xs, &p, &ConvLstmState::zeros(3, 5, 6)).unwrap();
    assert!(out.data().iter().all(|&v| v.abs() < 1.0));
}

#[test]
fn batch_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // (m, T, C, H, W) with channels on axis 2, as in the model.
    let (m, t, c, h, w) = (20, 3, 4, 3, 5);
    for trial in 0..10 {
        let scale = [0.01, 1.0, 30.0][trial % 3];
        let x = random(&[m, t, c, h, w], -scale, scale, &mut rng);
        let mut p = BatchNormParams::<f64>::new(c);
        p.gamma = random(&[c], 0.2, 3.0, &mut rng);
        p.beta = random(&[c], -2.0, 2.0, &mut rng);
        let (y, _, _) = batch_norm_train(&x, 2, &p).unwrap();
        for ch in 0..c {
            let pick = |v: &Tensor<f64>| -> Vec<f64> {
                (0..m * t)
                    .flat_map(|outer| {
                        let base = (outer * c + ch) * h * w;
                        v.data()[base..base + h * w].to_vec()
                    })
                    .collect()
            };
            let moments = |v: &[f64]| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                (mean, v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
            };
            let (_, var_x) = moments(&pick(&x));
            let (mean_y, var_y) = moments(&pick(&y));
            let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
            assert!((mean_y - b).abs() <= 1e-5, "channel {ch}: mean {mean_y} vs beta {b}");
            let expected = g * g * var_x / (var_x + p.epsilon);
            assert!((var_y - expected).abs() <= 1e-5, "channel {ch}: var {var_y} vs {expected}");
        }
    }
}

#[test]
fn batch_norm_infer_with_identity_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = BatchNormParams::<f64>::new(3);
    p.updates = 1;
    let x = random(&[2, 3, 4], -5.0, 5.0, &mut rng);
    let y = batch_norm_infer(&x, 1, &p).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-12));
    }
}

#[test]
fn direct_loop_conv2d_five_by_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 5, 5], -1.0, 1.0, &mut rng);
    let k = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = random(&[3], -1.0, 1.0, &mut rng);
    let y = conv2d_with(ConvKernel::Im2col, &x, &k, &b, &ConvSpec::conv2d(2, 3, (3, 3), (1, 1), Padding::Same)).unwrap();
    for co in 0..3 {
        for i in 0..5 {
            for j in 0..5 {
                let mut s = b.data()[co];
                for ci in 0..2 {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (r, q) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if (0..5).contains(&r) && (0..5).contains(&q) {
                                s += k.data()[((co * 2 + ci) * 3 + di) * 3 + dj] * x.data()[(ci * 5 + r as usize) * 5 + q as usize];
                            }
                        }
                    }
                }
                assert!((y.data()[(co * 5 + i) * 5 + j] - s).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn replicated_frames_collapse_to_summed_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frame = random(&[2, 6, 7], -1.0, 1.0, &mut rng);
    let mut clip = Vec::new();
    for c in 0..2 {
        for _ in 0..3 {
            clip.extend_from_slice(&frame.data()[c * 42..(c + 1) * 42]);
        }
    }
    let clip = Tensor::from_vec(&[2, 3, 6, 7], clip).unwrap();
    let k3 = random(&[4, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let bias = random(&[4], -1.0, 1.0, &mut rng);
    let y3 = conv3d(&clip, &k3, &bias, &ConvSpec::conv3d(2, 4, (3, 3, 3), (1, 1, 1), Padding::Same)).unwrap();
    let mut summed = vec![0.0; 4 * 2 * 9];
    for co in 0..4 {
        for ci in 0..2 {
            for kt in 0..3 {
                for s in 0..9 {
                    summed[(co * 2 + ci) * 9 + s] += k3.data()[((co * 2 + ci) * 3 + kt) * 9 + s];
                }
            }
        }
    }
    let k2 = Tensor::from_vec(&[4, 2, 3, 3], summed).unwrap();
    let y2 = conv2d_with(ConvKernel::Naive, &frame, &k2, &bias, &ConvSpec::conv2d(2, 4, (3, 3), (1, 1), Padding::Same)).unwrap();
    assert_eq!(y3.shape(), &[4, 1, 6, 7]);
    let y3 = y3.reshape(&[4, 6, 7]).unwrap();
    assert!(y3.max_abs_diff(&y2).unwrap() <= 1e-9);
}

#[test]
fn identity_kernel_passes_gradient_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[1, 4, 6], -1.0, 1.0, &mut rng);
    let k = Tensor::ones(&[1, 1, 1, 1]);
    let g = random(&[1, 4, 6], -1.0, 1.0, &mut rng);
    let grads = conv2d_backward(&x, &k, &g, &ConvSpec::conv2d(1, 1, (1, 1), (1, 1), Padding::Same)).unwrap();
    assert_eq!(grads.input, g);
}
