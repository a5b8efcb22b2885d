//! Multinomial logistic regression on frozen embeddings.

use serde::{Deserialize, Serialize};

use super::labeled::LabeledSet;
use super::metrics::top1_top5;
use super::{EvalError, Result};
use crate::ssl::{preprocess, Checkpoint};
use crate::tensor::{OptimizerConfig, OptimizerState, ParamStore, Tape, Target, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Stop once the full-batch loss changes by less than this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.05,
            weight_decay: 1e-4,
            max_steps: 1000,
            tolerance: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
    pub steps: usize,
    pub final_loss: f64,
}

fn standardize(x: &mut [f32], mean: &[f64], std: &[f64]) {
    let d = mean.len();
    for row in x.chunks_mut(d) {
        for j in 0..d {
            row[j] = ((row[j] as f64 - mean[j]) / std[j]) as f32;
        }
    }
}

/// Trains the probe on `train` embeddings `[N, D]` and scores `test`.
pub fn linear_probe_embeddings(
    train: &Tensor<f32>,
    train_labels: &[usize],
    test: &Tensor<f32>,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, d) = (train.shape()[0], train.shape()[1]);
    if n == 0 || test.shape()[0] == 0 {
        return Err(EvalError::Empty("probe data"));
    }
    if train_labels.len() != n || test_labels.len() != test.shape()[0] || test.shape()[1] != d {
        return Err(EvalError::Invalid(
            "probe inputs and labels disagree in shape".into(),
        ));
    }
    if let Some(&bad) = train_labels
        .iter()
        .chain(test_labels)
        .find(|&&y| y >= classes)
    {
        return Err(EvalError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    if train_labels.iter().all(|&y| y == train_labels[0]) {
        return Err(EvalError::SingleClass);
    }
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in train.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let std: Vec<f64> = (0..d)
        .map(|j| {
            mean[j] /= n as f64;
            (sq[j] / n as f64 - mean[j] * mean[j])
                .max(0.0)
                .sqrt()
                .max(1e-6)
        })
        .collect();
    let mut xtr = train.clone();
    standardize(xtr.data_mut(), &mean, &std);
    let mut xte = test.clone();
    standardize(xte.data_mut(), &mean, &std);

    let mut params = ParamStore::new();
    let w = params.insert("probe.weight", Tensor::zeros(&[classes, d]))?;
    let b = params.insert("probe.bias", Tensor::zeros(&[classes]))?;
    let mut opt = OptimizerState::new(OptimizerConfig::adamw(cfg.lr, cfg.weight_decay), &params)?;
    let target = Target::Classes(train_labels.to_vec());
    let mut prev = f64::INFINITY;
    let mut steps = 0;
    let mut final_loss = prev;
    while steps < cfg.max_steps {
        params.clear_grads();
        let mut tape = Tape::new();
        let x = tape.constant(&xtr);
        let wv = tape.param(&params, w);
        let bv = tape.param(&params, b);
        let logits = tape.linear(x, wv, Some(bv))?;
        let loss = tape.cross_entropy(logits, target.clone())?;
        final_loss = tape.scalar_value(loss) as f64;
        tape.backward(loss, &mut params)?;
        opt.step(&mut params)?;
        steps += 1;
        if (prev - final_loss).abs() < cfg.tolerance {
            break;
        }
        prev = final_loss;
    }

    let mut tape = Tape::no_grad();
    let x = tape.constant(&xte);
    let wv = tape.param(&params, w);
    let bv = tape.param(&params, b);
    let logits = tape.linear(x, wv, Some(bv))?;
    let scores = Tensor::new(vec![test.shape()[0], classes], tape.data(logits).to_vec())?;
    let (top1, top5) = top1_top5(&scores, test_labels)?;
    Ok(ProbeResult {
        top1,
        top5,
        steps,
        final_loss,
    })
}

/// Probe on the frozen embedding layer of `checkpoint`. Read-only on the
/// checkpoint.
pub fn linear_probe(
    checkpoint: &Checkpoint,
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.num_classes() != test.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            head: train.num_classes(),
            vocab: test.num_classes(),
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty("probe labeled set"));
    }
    let net = checkpoint.eval_network()?;
    let size = net.arch.backbone.input_size;
    let etr = net.embed(&preprocess(&train.images(), size))?;
    let ete = net.embed(&preprocess(&test.images(), size))?;
    linear_probe_embeddings(
        &etr,
        &train.labels(),
        &ete,
        &test.labels(),
        train.num_classes(),
        cfg,
    )
}
