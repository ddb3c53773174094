use super::check_shape;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// `weights (M,N) · x (N) + bias (M)`.
pub fn dense<S: Scalar>(x: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let batch = x.clone().reshape(&[1, x.len()])?;
    let y = dense_batch(&batch, weights, bias)?;
    let m = weights.shape()[0];
    y.reshape(&[m])
}

fn dims<S: Scalar>(x: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if weights.ndim() != 2 {
        return Err(Error::dim("dense", "weights rank", 2, weights.ndim()));
    }
    if x.ndim() != 2 {
        return Err(Error::dim("dense", "input rank", 2, x.ndim()));
    }
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    check_shape("dense", "input features", &[n], &x.shape()[1..])?;
    check_shape("dense", "bias", &[m], bias.shape())?;
    Ok((x.shape()[0], m, n))
}

/// Row-wise [`dense`] over a (batch, N) input.
pub fn dense_batch<S: Scalar>(x: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, m, n) = dims(x, weights, bias)?;
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(batch, n, m, S::one(), x.data(), Trans::No, weights.data(), Trans::Yes, S::one(), &mut out);
    Tensor::from_vec(&[batch, m], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<S = f32> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    weights: &Tensor<S>,
    grad_output: &Tensor<S>,
) -> Result<DenseGrads<S>> {
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    let bias_like = Tensor::zeros(&[m]);
    let (batch, _, _) = dims(x, weights, &bias_like)?;
    check_shape("dense_backward", "grad_output", &[batch, m], grad_output.shape())?;
    let mut gw = vec![S::zero(); m * n];
    gemm(m, batch, n, S::one(), grad_output.data(), Trans::Yes, x.data(), Trans::No, S::zero(), &mut gw);
    let mut gx = vec![S::zero(); batch * n];
    gemm(batch, m, n, S::one(), grad_output.data(), Trans::No, weights.data(), Trans::No, S::zero(), &mut gx);
    let mut gb = vec![S::zero(); m];
    for row in grad_output.data().chunks(m) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(x.shape(), gx)?,
        weights: Tensor::from_vec(&[m, n], gw)?,
        bias: Tensor::from_vec(&[m], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 4.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        assert_eq!(dense(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);
    }

    #[test]
    fn matches_direct_loop() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = [0.3, -1.1, 2.0, 0.25];
        let b = [0.1, 0.2, -0.3];
        let y = dense(
            &Tensor::from_vec(&[4], x.to_vec()).unwrap(),
            &Tensor::from_vec(&[3, 4], w.clone()).unwrap(),
            &Tensor::from_vec(&[3], b.to_vec()).unwrap(),
        )
        .unwrap();
        for r in 0..3 {
            let mut acc = b[r];
            for c in 0..4 {
                acc += w[r * 4 + c] * x[c];
            }
            assert!((y.data()[r] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_feature_mismatch() {
        let err = dense(&Tensor::<f32>::zeros(&[5]), &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("input features"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::<f64>::full(&[2, 3], 1.5);
        let w = Tensor::full(&[4, 3], -0.5);
        let g = dense_backward(&x, &w, &Tensor::zeros(&[2, 4])).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }
}
