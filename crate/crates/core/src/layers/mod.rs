//! Differentiable layers with explicit forward caches and backward passes.

mod activation;
mod batch_norm;
pub mod conv_lstm;
mod dense;

pub use activation::{dropout_backward, dropout_train, leaky_relu, leaky_relu_backward, DEFAULT_LEAKY_SLOPE};
pub use batch_norm::{batch_norm_backward, batch_norm_infer, batch_norm_train, DEFAULT_EPSILON, DEFAULT_MOMENTUM, BatchNormCache, BatchNormParams, BatchStats};
pub use conv_lstm::{
    conv_lstm_backward_sequence, conv_lstm_forward_sequence, conv_lstm_forward_sequence_cached, conv_lstm_step,
    conv_lstm_step_backward, conv_lstm_step_cached, CellUpdate, ConvLstmGrads, ConvLstmParams, ConvLstmState,
    SequenceCache, StepCache,
};
pub use dense::{dense, dense_backward, dense_batch, DenseGrads};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn check_shape(context: &'static str, what: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::dim(context, what, format!("{expected:?}"), format!("{found:?}")));
    }
    Ok(())
}

/// Fills `t` from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn uniform_fan_in<S: Scalar, R: Rng>(t: &mut Tensor<S>, fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = S::lit(rng.gen_range(-bound..bound));
    }
}
