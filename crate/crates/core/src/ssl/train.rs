//! Epoch loop shared by both objectives.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, Checkpoint, SubsetDescriptor};
use super::dino::{dino_step, teacher_momentum, DinoBatch, DinoConfig, DinoState};
use super::network::{Architecture, BackboneSpec, HeadSpec, Network};
use super::temporal::{temporal_classification_step, TemporalClassConfig};
use super::TrainError;
use crate::augment::{apply_policy, dino_multicrop, AugmentPolicy};
use crate::image::Image;
use crate::seed;
use crate::stream::{EpisodeLabeling, StreamIndex};
use crate::tensor::{OptimizerState, Tensor, TensorError};
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    TemporalClassification,
    Dino,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::TemporalClassification => "temporal_classification",
            Algorithm::Dino => "dino",
        }
    }
}

/// Stop once the epoch loss has failed to improve by `min_delta` for
/// `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            min_delta: 1e-3,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub backbone: BackboneSpec,
    pub temporal: TemporalClassConfig,
    pub dino: DinoConfig,
    pub early_stop: Option<EarlyStop>,
    /// Fixed optimizer-step budget; overrides the epoch count when set (the
    /// last epoch may be partial).
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::TemporalClassification,
            backbone: BackboneSpec::default(),
            temporal: TemporalClassConfig::default(),
            dino: DinoConfig::default(),
            early_stop: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        match self.algorithm {
            Algorithm::TemporalClassification => self.temporal.epochs,
            Algorithm::Dino => self.dino.epochs,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self.algorithm {
            Algorithm::TemporalClassification => self.temporal.batch_size,
            Algorithm::Dino => self.dino.batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.backbone.validate()?;
        if self.max_steps == Some(0) {
            return Err(TrainError::Config("step budget must be positive".into()));
        }
        if self.batch_size() == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        match self.algorithm {
            Algorithm::TemporalClassification => {
                self.temporal.optimizer.validate()?;
                self.temporal.augment.validate()?;
                if self.temporal.augment.output_size() != Some(self.backbone.input_size) {
                    return Err(TrainError::Config(format!(
                        "augment output size {:?} differs from backbone input {}",
                        self.temporal.augment.output_size(),
                        self.backbone.input_size
                    )));
                }
                if !(self.temporal.episode_length_s > 0.0) {
                    return Err(TrainError::Config("episode length must be positive".into()));
                }
            }
            Algorithm::Dino => {
                self.dino.validate()?;
                self.dino.multicrop.validate()?;
            }
        }
        Ok(())
    }

    /// Network layout for a subset with `num_episodes` episodes.
    pub fn architecture(&self, num_episodes: usize) -> Architecture {
        let head = match self.algorithm {
            Algorithm::TemporalClassification => HeadSpec::Linear {
                classes: num_episodes,
                zero_init: true,
            },
            Algorithm::Dino => HeadSpec::Mlp {
                hidden: self.dino.hidden_dim,
                bottleneck: self.dino.bottleneck_dim,
                out: self.dino.out_dim,
            },
        };
        Architecture {
            backbone: self.backbone.clone(),
            head,
        }
    }
}

/// Rendered frames of one training subset with their episode labels.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub frames: Vec<Image>,
    pub episode_labels: Vec<usize>,
    pub num_episodes: usize,
    pub subset: SubsetDescriptor,
}

/// Renders every frame of `index` and labels it by episode.
pub fn render_training_data(
    world: &World,
    index: &StreamIndex,
    episode_length_s: f64,
    subset: SubsetDescriptor,
) -> Result<TrainingData, TrainError> {
    let labeling = EpisodeLabeling::new(index, episode_length_s)?;
    let n = index.frame_count();
    let frames: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|k| world.render_frame(index.timestamp(k)).0.image)
        .collect();
    let episode_labels = (0..n)
        .map(|k| labeling.label(k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainingData {
        frames,
        episode_labels,
        num_episodes: labeling.num_episodes,
        subset,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

pub fn write_trace_csv(path: &Path, trace: &[EpochMetrics]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.into()))?;
    for m in trace {
        w.serialize(m).map_err(|e| TrainError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

enum Learner {
    Temporal { net: Network, opt: OptimizerState },
    Dino(Box<DinoState>),
}

impl Learner {
    fn lr(&self) -> f64 {
        match self {
            Learner::Temporal { opt, .. } => opt.config.lr,
            Learner::Dino(s) => s.optimizer.config.lr,
        }
    }
}

fn non_finite(step: u64, lr: f64, grad_norm: Option<f64>, detail: impl Into<String>) -> TrainError {
    TrainError::NonFinite {
        step,
        lr,
        grad_norm,
        detail: detail.into(),
    }
}

fn sample_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed::hash(&[seed, seed::tag("augment"), epoch as u64, sample as u64])
}

fn temporal_batch(
    frames: &[Image],
    idx: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: usize,
) -> Tensor<f32> {
    let views: Vec<Image> = idx
        .par_iter()
        .map(|&i| apply_policy(&frames[i], policy, sample_seed(seed, epoch, i)))
        .collect();
    Image::batch(&views)
}

fn dino_batch(
    frames: &[Image],
    idx: &[usize],
    cfg: &DinoConfig,
    seed: u64,
    epoch: usize,
) -> Result<DinoBatch, TrainError> {
    let per_sample = idx
        .par_iter()
        .map(|&i| dino_multicrop(&frames[i], &cfg.multicrop, sample_seed(seed, epoch, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let n_global = cfg.multicrop.n_global;
    let stack = |v: usize| -> Tensor<f32> {
        let col: Vec<Image> = per_sample.iter().map(|s| s.views[v].clone()).collect();
        Image::batch(&col)
    };
    Ok(DinoBatch {
        globals: (0..n_global).map(stack).collect(),
        locals: (n_global..cfg.multicrop.num_views()).map(stack).collect(),
    })
}

/// Trains one model. The result depends only on `(config, data, seed)`.
pub fn train(
    config: &TrainConfig,
    data: &TrainingData,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.frames.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    if data.frames.len() != data.episode_labels.len() {
        return Err(TrainError::Config(format!(
            "{} frames but {} labels",
            data.frames.len(),
            data.episode_labels.len()
        )));
    }
    if !(data.subset.hours > 0.0) {
        return Err(TrainError::Config(format!(
            "subset hours must be positive, got {}",
            data.subset.hours
        )));
    }
    let arch = config.architecture(data.num_episodes);
    let net = Network::new(arch, seed::hash(&[seed, seed::tag("init")]))?;
    let mut learner = match config.algorithm {
        Algorithm::TemporalClassification => {
            let opt = OptimizerState::new(config.temporal.optimizer.clone(), &net.params)?;
            Learner::Temporal { net, opt }
        }
        Algorithm::Dino => Learner::Dino(Box::new(DinoState::new(net, &config.dino)?)),
    };

    let n = data.frames.len();
    let bs = config.batch_size();
    let batches_per_epoch = n.div_ceil(bs);
    let (epochs, total_steps) = match config.max_steps {
        Some(s) => ((s as usize).div_ceil(batches_per_epoch), s),
        None => (
            config.epochs(),
            (config.epochs() * batches_per_epoch) as u64,
        ),
    };
    let mut step = 0u64;
    let mut last_grad_norm = None;
    let mut trace = Vec::with_capacity(epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..epochs {
        let started = Instant::now();
        order.shuffle(&mut seed::rng(&[seed, seed::tag("shuffle"), epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for idx in order.chunks(bs) {
            if step >= total_steps {
                break;
            }
            let lr = learner.lr();
            let result = match &mut learner {
                Learner::Temporal { net, opt } => {
                    let x =
                        temporal_batch(&data.frames, idx, &config.temporal.augment, seed, epoch);
                    let labels: Vec<usize> = idx.iter().map(|&i| data.episode_labels[i]).collect();
                    temporal_classification_step(net, opt, &x, &labels)
                        .map(|o| (o.loss, o.grad_norm))
                }
                Learner::Dino(state) => {
                    let batch = dino_batch(&data.frames, idx, &config.dino, seed, epoch)?;
                    let m = teacher_momentum(&config.dino, step, total_steps);
                    dino_step(state, &batch, &config.dino, m).map(|r| (r.loss, r.grad_norm))
                }
            };
            let (loss, grad_norm) = match result {
                Ok(v) => v,
                Err(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGrad(_))) => {
                    return Err(non_finite(step, lr, last_grad_norm, e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(non_finite(
                    step,
                    lr,
                    Some(grad_norm),
                    format!("loss {loss}, grad norm {grad_norm}"),
                ));
            }
            last_grad_norm = Some(grad_norm);
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
            step += 1;
        }
        let loss = loss_sum / seen.max(1) as f64;
        trace.push(EpochMetrics {
            epoch: epoch + 1,
            loss,
            wall_s: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "{} epoch {} loss {loss:.4}",
            config.algorithm.as_str(),
            epoch + 1
        );
        if let Some(es) = config.early_stop {
            if best - loss < es.min_delta {
                stale += 1;
            } else {
                stale = 0;
            }
            best = best.min(loss);
            if stale >= es.patience && epoch + 1 < epochs {
                stopped_early = true;
                break;
            }
        }
    }

    let (network, optimizer, teacher, center) = match learner {
        Learner::Temporal { net, opt } => (net, opt, None, None),
        Learner::Dino(state) => {
            let s = *state;
            (s.student, s.optimizer, Some(s.teacher), Some(s.center))
        }
    };
    let checkpoint = Checkpoint {
        config_hash: config_hash(config),
        config: config.clone(),
        network,
        optimizer: Some(optimizer),
        teacher,
        center,
        epoch: trace.len(),
        subset: data.subset.clone(),
    };
    Ok(TrainOutcome {
        checkpoint,
        trace,
        stopped_early,
    })
}

/// Deterministic evaluation preprocessing to the backbone input size.
pub fn preprocess(frames: &[Image], input_size: usize) -> Vec<Image> {
    let policy = AugmentPolicy::eval(input_size);
    frames
        .par_iter()
        .map(|f| apply_policy(f, &policy, 0))
        .collect()
}

/// Frozen embeddings `[N, D]` of preprocessed frames.
pub fn embed(checkpoint: &Checkpoint, frames: &[Image]) -> Result<Tensor<f32>, TrainError> {
    Ok(checkpoint.eval_network()?.embed(frames)?)
}
