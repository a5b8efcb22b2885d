//! Supervised finetuning on labeled sets.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::labeled::LabeledSet;
use super::metrics::top1_top5;
use super::{EvalError, Result};
use crate::augment::{apply_policy, AugmentPolicy};
use crate::image::Image;
use crate::seed;
use crate::ssl::{preprocess, temporal_classification_step, Checkpoint, HeadSpec, Network};
use crate::tensor::{OptimizerConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Train only the classifier head.
    pub head_only: bool,
    /// Training-time augmentation; the finetune policy at the backbone input
    /// size when unset.
    pub augment: Option<AugmentPolicy>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 1e-4,
            batch_size: 32,
            head_only: false,
            augment: None,
        }
    }
}

fn classifier(classes: usize) -> HeadSpec {
    HeadSpec::Linear {
        classes,
        zero_init: false,
    }
}

/// Finetunes `net` in place on `labeled`. The head must already match the
/// vocabulary.
pub fn finetune_network(
    net: &mut Network,
    labeled: &LabeledSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(EvalError::Empty("labeled set"));
    }
    if net.out_dim() != labeled.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            head: net.out_dim(),
            vocab: labeled.num_classes(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(EvalError::Invalid("batch size must be positive".into()));
    }
    let size = net.arch.backbone.input_size;
    let policy = cfg
        .augment
        .clone()
        .unwrap_or_else(|| AugmentPolicy::finetune(size));
    if policy.output_size() != Some(size) {
        return Err(EvalError::Invalid(format!(
            "augment output {:?} differs from backbone input {size}",
            policy.output_size()
        )));
    }
    net.set_backbone_frozen(cfg.head_only);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), &net.params)?;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(&[
            seed,
            seed::tag("finetune-shuffle"),
            epoch as u64,
        ]));
        for idx in order.chunks(cfg.batch_size) {
            let views: Vec<Image> = idx
                .par_iter()
                .map(|&i| {
                    let s = seed::hash(&[seed, seed::tag("finetune-aug"), epoch as u64, i as u64]);
                    apply_policy(&labeled.items[i].0, &policy, s)
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| labeled.items[i].1).collect();
            temporal_classification_step(net, &mut opt, &Image::batch(&views), &labels)?;
        }
    }
    net.set_backbone_frozen(false);
    Ok(())
}

/// Backbone of `checkpoint` with a fresh classifier over the labeled
/// vocabulary, finetuned for `cfg.epochs` epochs.
pub fn few_shot_finetune(
    checkpoint: &Checkpoint,
    labeled: &LabeledSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Network> {
    let base = checkpoint.eval_network()?;
    let mut net = base.with_new_head(
        classifier(labeled.num_classes()),
        seed::hash(&[seed, seed::tag("head")]),
    )?;
    finetune_network(&mut net, labeled, cfg, seed)?;
    Ok(net)
}

/// Top-1 and top-5 accuracy of `net` on `test` with eval preprocessing.
pub fn evaluate(net: &Network, test: &LabeledSet) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    if net.out_dim() != test.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            head: net.out_dim(),
            vocab: test.num_classes(),
        });
    }
    let inputs = preprocess(&test.images(), net.arch.backbone.input_size);
    let scores = net.logits(&inputs)?;
    top1_top5(&scores, &test.labels())
}

#[derive(Clone, Debug)]
pub struct PracticeOutcome {
    pub network: Network,
    pub warnings: Vec<String>,
}

/// Optional full finetune on `prior` (its head is then discarded), followed by
/// a finetune on the practice set with a fresh head over its vocabulary.
pub fn practice_finetune(
    checkpoint: &Checkpoint,
    practice: &LabeledSet,
    prior: Option<&LabeledSet>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<PracticeOutcome> {
    let mut warnings = Vec::new();
    for c in practice.missing_classes() {
        let msg = format!(
            "practice set has no items for category `{}`",
            practice.classes[c]
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut net = checkpoint.eval_network()?;
    if let Some(prior) = prior {
        let mut stage1 = net.with_new_head(
            classifier(prior.num_classes()),
            seed::hash(&[seed, seed::tag("prior-head")]),
        )?;
        finetune_network(&mut stage1, prior, cfg, seed::hash(&[seed, 1]))?;
        net = stage1;
    }
    let mut stage2 = net.with_new_head(
        classifier(practice.num_classes()),
        seed::hash(&[seed, seed::tag("practice-head")]),
    )?;
    finetune_network(&mut stage2, practice, cfg, seed::hash(&[seed, 2]))?;
    Ok(PracticeOutcome {
        network: stage2,
        warnings,
    })
}
