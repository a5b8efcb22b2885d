//! Temporal classification: predict which fixed-length episode a frame came from.

use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::augment::AugmentPolicy;
use crate::stream::EPISODE_LENGTH_S;
use crate::tensor::{OptimizerConfig, OptimizerState, Result, Tape, Target, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalClassConfig {
    pub episode_length_s: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentPolicy,
}

impl Default for TemporalClassConfig {
    fn default() -> Self {
        TemporalClassConfig {
            episode_length_s: EPISODE_LENGTH_S,
            optimizer: OptimizerConfig::adam(5e-4),
            batch_size: 64,
            epochs: 12,
            augment: AugmentPolicy::temporal_classification(32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub grad_norm: f64,
}

fn check_labels(net: &Network, batch: &Tensor<f32>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() || batch.shape()[0] != labels.len() {
        return Err(TensorError::Invalid(format!(
            "batch of {} inputs with {} labels",
            batch.shape()[0],
            labels.len()
        )));
    }
    let classes = net.out_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Invalid(format!(
            "episode label {bad} out of range for {classes} episodes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over episode classes without touching parameters.
pub fn classification_loss(net: &Network, batch: &Tensor<f32>, labels: &[usize]) -> Result<f32> {
    check_labels(net, batch, labels)?;
    let mut tape = Tape::no_grad();
    let x = tape.constant(batch);
    let logits = net.forward_var(&mut tape, &net.params, x)?;
    let loss = tape.cross_entropy(logits, Target::Classes(labels.to_vec()))?;
    Ok(tape.scalar_value(loss))
}

/// One optimizer step on an (already augmented) batch `[N, 3, S, S]`.
pub fn temporal_classification_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    batch: &Tensor<f32>,
    labels: &[usize],
) -> Result<StepOutcome> {
    check_labels(net, batch, labels)?;
    net.params.clear_grads();
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let logits = net.forward_var(&mut tape, &net.params, x)?;
    let loss = tape.cross_entropy(logits, Target::Classes(labels.to_vec()))?;
    let value = tape.scalar_value(loss);
    tape.backward(loss, &mut net.params)?;
    let report = opt.step(&mut net.params)?;
    Ok(StepOutcome {
        loss: value,
        grad_norm: report.grad_norm,
    })
}
