use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, clip_global_norm, mse_loss, AdamState, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Mode, Model, LABEL_SCALE};

/// One training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Receives the outputs of [`train`] as they are produced.
pub trait TrainSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()>;
    fn checkpoint(&mut self, epoch: usize, checkpoint: &Checkpoint) -> Result<()>;
}

/// Collects everything in memory.
impl TrainSink for Vec<MetricRecord> {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, _epoch: usize, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss of the last epoch.
    pub final_epoch_loss: f64,
    pub steps: u64,
}

/// Minibatch Adam on the MSE of scaled labels. Shuffling and dropout draw
/// from separate streams derived from `config.seed`.
pub fn train(model: &mut Model<f32>, dataset: &Dataset, config: &TrainConfig, sink: &mut dyn TrainSink) -> Result<(Checkpoint, TrainSummary)> {
    config.validate()?;
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if dataset.shape() != model.spec().input_shape {
        return Err(Error::dim(
            "train",
            "segment shape",
            format!("{:?}", model.spec().input_shape),
            format!("{:?}", dataset.shape()),
        ));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, fewer than the batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let started = Instant::now();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::new(model.params().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    let mut first_loss = None;
    let mut last_loss = f64::NAN;
    let mut epoch_loss = f64::NAN;
    let mut checkpoint = None;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut sum = 0.0;
        let mut batches = 0usize;
        // A trailing batch smaller than 2 cannot be batch-normalized.
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            step += 1;
            let (x, labels) = dataset.batch(chunk)?;
            let targets: Vec<f32> = labels.iter().map(|&y| (y as f64 / LABEL_SCALE) as f32).collect();
            let (preds, cache) = model.forward(&x, Mode::Train, &mut dropout_rng)?;
            let (loss, grad) = mse_loss(&preds, &targets)?;
            if !loss.is_finite() {
                return Err(non_finite(model, "loss"));
            }
            let mut grads = model.backward(&cache, &grad)?;
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite { tensor: format!("gradient of {name}") });
            }
            if let Some(max) = config.clip_norm {
                let mut refs: Vec<_> = grads.entries.iter_mut().map(|(_, t)| t).collect();
                clip_global_norm(&mut refs, max);
            }
            {
                let grad_refs: Vec<_> = grads.entries.iter().map(|(_, t)| t).collect();
                let mut params: Vec<_> = model.params_mut().into_iter().map(|(_, t)| t).collect();
                adam_step(&mut params, &grad_refs, &mut adam, &config.adam)?;
            }
            model.apply_batch_stats(&cache);
            if let Some((name, _)) = model.params().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite { tensor: name });
            }
            first_loss.get_or_insert(loss);
            last_loss = loss;
            sum += loss;
            batches += 1;
            let wall_ms = config.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3);
            sink.metric(&MetricRecord { epoch, step, loss, wall_ms })?;
        }
        epoch_loss = sum / batches as f64;
        let ckpt = Checkpoint::new(model.clone(), step, Some(adam.clone()));
        sink.checkpoint(epoch, &ckpt)?;
        checkpoint = Some(ckpt);
    }
    let summary = TrainSummary {
        first_loss: first_loss.expect("at least one batch"),
        final_loss: last_loss,
        final_epoch_loss: epoch_loss,
        steps: step,
    };
    Ok((checkpoint.expect("at least one epoch"), summary))
}

fn non_finite(model: &Model<f32>, fallback: &str) -> Error {
    let name = model
        .params()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
        .map(|(n, _)| n)
        .or_else(|| {
            model.norms().iter().enumerate().find_map(|(l, bn)| {
                (!bn.running_mean.is_finite() || !bn.running_var.is_finite()).then(|| format!("bn{l}.running stats"))
            })
        })
        .unwrap_or_else(|| fallback.to_string());
    Error::NonFinite { tensor: name }
}
