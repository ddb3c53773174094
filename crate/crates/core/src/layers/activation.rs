use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: f64) -> Tensor<S> {
    let slope = S::lit(slope);
    x.map(|v| if v >= S::zero() { v } else { slope * v })
}

/// Gradient of [`leaky_relu`] with respect to its input `x`.
pub fn leaky_relu_backward<S: Scalar>(x: &Tensor<S>, grad_output: &Tensor<S>, slope: f64) -> Result<Tensor<S>> {
    let slope = S::lit(slope);
    x.zip_map(grad_output, |v, g| if v >= S::zero() { g } else { slope * g })
}

/// Inverted dropout. Returns the output and the multiplicative mask
/// (`0` or `1/(1-rate)` per element).
pub fn dropout_train<S: Scalar, R: Rng>(x: &Tensor<S>, rate: f64, rng: &mut R) -> Result<(Tensor<S>, Tensor<S>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok((x.clone(), Tensor::ones(x.shape())));
    }
    let keep = S::lit(1.0 / (1.0 - rate));
    let mask_data = (0..x.len()).map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep }).collect();
    let mask = Tensor::from_vec(x.shape(), mask_data)?;
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, mask))
}

pub fn dropout_backward<S: Scalar>(mask: &Tensor<S>, grad_output: &Tensor<S>) -> Result<Tensor<S>> {
    grad_output.zip_map(mask, |g, m| g * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_relu_pieces() {
        let x = Tensor::<f64>::from_vec(&[3], vec![5.0, 0.0, -5.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[5.0, 0.0, -1.0]);
        let g = leaky_relu_backward(&x, &Tensor::full(&[3], 2.0), 0.2).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, 0.4]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let (y, mask) = dropout_train(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_is_unbiased() {
        // Mean of 10^4 draws stays within 3 standard errors of x.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let draws = 10_000;
        let mut sums = [0.0; 3];
        for _ in 0..draws {
            let (y, _) = dropout_train(&x, 0.5, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, &v) in sums.iter().zip(x.data()) {
            // y is 0 or 2v with equal probability: sd = |v|.
            let stderr = v.abs() / (draws as f64).sqrt();
            assert!((s / draws as f64 - v).abs() <= 3.0 * stderr, "mean {} vs {v}", s / draws as f64);
        }
    }

    #[test]
    fn dropout_zero_fraction_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (_, mask) = dropout_train(&Tensor::<f32>::ones(&[1000]), 0.5, &mut rng).unwrap();
            let zeros = mask.data().iter().filter(|&&m| m == 0.0).count();
            assert!((350..=650).contains(&zeros), "{zeros}");
        }
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_train(&Tensor::<f32>::ones(&[2]), 1.0, &mut rng).is_err());
    }
}
