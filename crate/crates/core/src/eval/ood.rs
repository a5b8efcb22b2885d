use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distort::{apply_distortion, DistortionContext, DistortionKind, DistortionSpec};
use super::labeled::LabeledSet;
use super::metrics::top1_top5;
use super::{EvalError, Result};
use crate::seed;
use crate::ssl::{preprocess, Network};
use crate::tensor::Tensor;

/// Practice trials with feedback given before OOD evaluation.
pub const PRACTICE_TRIALS: usize = 320;

/// Category names of the full-scale OOD benchmark, used for report labels.
pub const FULL_SCALE_CATEGORIES: [&str; 16] = [
    "airplane", "bear", "bicycle", "bird", "boat", "bottle", "car", "cat", "chair", "clock", "dog",
    "elephant", "keyboard", "knife", "oven", "truck",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSuite {
    pub entries: Vec<(DistortionKind, Vec<f64>)>,
    pub categories: Vec<String>,
    pub practice_size: usize,
}

impl Default for OodSuite {
    fn default() -> Self {
        use DistortionKind::*;
        OodSuite {
            entries: vec![
                (Contrast, vec![0.5, 0.3, 0.1, 0.05]),
                (UniformNoise, vec![0.03, 0.1, 0.2, 0.35]),
                (LowPass, vec![1.0, 2.0, 3.0]),
                (HighPass, vec![3.0, 1.5, 0.7]),
                (PhaseScrambling, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]),
                (PowerEqualization, vec![0.0]),
                (FalseColor, vec![0.0]),
                (Rotation, vec![90.0, 180.0, 270.0]),
                (Grayscale, vec![0.0]),
            ],
            categories: FULL_SCALE_CATEGORIES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            practice_size: PRACTICE_TRIALS,
        }
    }
}

impl OodSuite {
    pub fn conditions(&self) -> Result<Vec<DistortionSpec>> {
        if self.entries.is_empty() {
            return Err(EvalError::Empty("OOD suite"));
        }
        let mut out = Vec::new();
        for (kind, grid) in &self.entries {
            if grid.is_empty() {
                return Err(EvalError::Invalid(format!(
                    "{} has no parameter levels",
                    kind.as_str()
                )));
            }
            for &p in grid {
                out.push(DistortionSpec::new(*kind, p)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionAccuracy {
    pub kind: DistortionKind,
    pub param: f64,
    pub top1: f64,
    pub top5: f64,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub conditions: Vec<ConditionAccuracy>,
    /// Unweighted mean top-1 accuracy over conditions.
    pub mean_ood: f64,
}

/// Accuracy of `net` under every suite condition; each condition weighs
/// equally in the mean.
pub fn ood_eval(
    net: &Network,
    suite: &OodSuite,
    test: &LabeledSet,
    seed: u64,
) -> Result<OodReport> {
    let conditions = suite.conditions()?;
    if test.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    if net.out_dim() != test.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            head: net.out_dim(),
            vocab: test.num_classes(),
        });
    }
    let images = test.images();
    let labels = test.labels();
    let ctx = if conditions
        .iter()
        .any(|c| c.kind == DistortionKind::PowerEqualization)
    {
        DistortionContext::from_images(&images)?
    } else {
        DistortionContext::default()
    };
    let size = net.arch.backbone.input_size;
    let mut out = Vec::with_capacity(conditions.len());
    for (ci, spec) in conditions.iter().enumerate() {
        let distorted = images
            .par_iter()
            .enumerate()
            .map(|(i, im)| {
                apply_distortion(im, spec, &ctx, seed::hash(&[seed, ci as u64, i as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Tensor<f32> = net.logits(&preprocess(&distorted, size))?;
        let (top1, top5) = top1_top5(&scores, &labels)?;
        out.push(ConditionAccuracy {
            kind: spec.kind,
            param: spec.param,
            top1,
            top5,
            n_test: images.len(),
        });
    }
    let mean_ood = out.iter().map(|c| c.top1).sum::<f64>() / out.len() as f64;
    Ok(OodReport {
        conditions: out,
        mean_ood,
    })
}
