use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, ExperimentError, Result};
use crate::augment::{AugmentPolicy, MultiCropSpec};
use crate::eval::{FinetuneConfig, ProbeConfig};
use crate::ssl::{
    config_hash, Algorithm, BackboneSpec, DinoConfig, EarlyStop, TemporalClassConfig, TrainConfig,
};
use crate::tensor::OptimizerConfig;
use crate::world::WorldSpec;

/// Overrides `output_dir` when set. No other key can be overridden.
pub const OUTPUT_DIR_ENV: &str = "EGOSCALE_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "fewshot_1pct")]
    FewShot1,
    #[serde(rename = "fewshot_2pct")]
    FewShot2,
    #[serde(rename = "linear_probe")]
    LinearProbe,
    #[serde(rename = "ood_practice")]
    OodPractice,
    #[serde(rename = "ood_practice_2pct")]
    OodPractice2,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::FewShot1,
        Protocol::FewShot2,
        Protocol::LinearProbe,
        Protocol::OodPractice,
        Protocol::OodPractice2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::FewShot1 => "fewshot_1pct",
            Protocol::FewShot2 => "fewshot_2pct",
            Protocol::LinearProbe => "linear_probe",
            Protocol::OodPractice => "ood_practice",
            Protocol::OodPractice2 => "ood_practice_2pct",
        }
    }
}

/// Augmentation family used during self-supervised training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    /// The full-strength policies of the large-scale setup.
    Standard,
    /// Weaker crops and jitter, learnable on small synthetic frames.
    Mild,
}

/// Flat experiment schema; every key is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub algorithm: Algorithm,
    pub seed: u64,

    pub world_seed: u64,
    pub world_classes: usize,
    pub world_scenes: usize,
    pub frame_size: usize,
    pub eval_world_seed: u64,
    pub eval_world_scenes: usize,
    /// Labeled frames are drawn from `[0, eval_horizon_s)` of the eval world.
    pub eval_horizon_s: f64,

    /// Length of the full training stream; subsets are fractions of it.
    pub stream_duration_s: f64,
    pub fps: f64,
    pub fractions: Vec<f64>,
    pub repeats: usize,

    pub input_size: usize,
    pub embed_dim: usize,
    pub augment: AugmentPreset,
    pub episode_length_s: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub early_stop: bool,
    pub dino_teacher_momentum: f64,
    pub dino_hidden_dim: usize,
    pub dino_bottleneck_dim: usize,
    pub dino_out_dim: usize,
    pub dino_local_crops: usize,

    pub protocols: Vec<Protocol>,
    /// Labeled examples per class of the `fewshot_1pct` set; `fewshot_2pct`
    /// doubles it.
    pub few_shot_per_class: usize,
    pub test_per_class: usize,
    pub practice_per_class: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    pub probe_lr: f64,
    pub probe_max_steps: usize,

    pub top5_threshold: f64,
    /// Derived from the bundled fixture when unset.
    pub ood_threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs"),
            algorithm: Algorithm::TemporalClassification,
            seed: 0,
            world_seed: 0,
            world_classes: 16,
            world_scenes: 12,
            frame_size: 64,
            eval_world_seed: 777,
            eval_world_scenes: 48,
            eval_horizon_s: 20_000.0,
            stream_duration_s: 2000.0,
            fps: 1.0,
            fractions: vec![1.0, 0.1, 0.01, 0.001],
            repeats: 3,
            input_size: 32,
            embed_dim: 128,
            augment: AugmentPreset::Mild,
            episode_length_s: 10.0,
            lr: 2e-3,
            batch_size: 32,
            epochs: 12,
            max_steps: None,
            early_stop: false,
            dino_teacher_momentum: 0.99,
            dino_hidden_dim: 128,
            dino_bottleneck_dim: 64,
            dino_out_dim: 64,
            dino_local_crops: 2,
            protocols: vec![Protocol::FewShot1, Protocol::LinearProbe],
            few_shot_per_class: 13,
            test_per_class: 10,
            practice_per_class: 20,
            finetune_epochs: 20,
            finetune_lr: 1e-3,
            finetune_batch_size: 32,
            probe_lr: 0.05,
            probe_max_steps: 1000,
            top5_threshold: crate::scaling::TOP5_HUMAN_THRESHOLD,
            ood_threshold: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML file and applies [`OUTPUT_DIR_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment configs serialize to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.fractions.is_empty() {
            return bad("fractions must not be empty".into());
        }
        if let Some(f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!("fractions must lie in (0, 1] (got {f})"));
        }
        if self.fractions.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!(
                "fractions must be strictly descending (got {:?})",
                self.fractions
            ));
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.protocols.is_empty() {
            return bad("at least one protocol is required".into());
        }
        for (i, p) in self.protocols.iter().enumerate() {
            if self.protocols[..i].contains(p) {
                return bad(format!("protocol {} listed twice", p.as_str()));
            }
        }
        if !(self.stream_duration_s > 0.0 && self.stream_duration_s.is_finite()) {
            return bad(format!(
                "stream_duration_s must be positive (got {})",
                self.stream_duration_s
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive (got {})", self.fps));
        }
        let smallest = self.fractions.last().copied().unwrap_or(1.0) * self.stream_duration_s;
        if crate::world::floor_count(smallest, self.fps) == 0 {
            return bad(format!(
                "the smallest subset ({smallest} s at {} fps) holds no frames",
                self.fps
            ));
        }
        if !(self.eval_horizon_s > 0.0) {
            return bad("eval_horizon_s must be positive".into());
        }
        if self.few_shot_per_class == 0 || self.test_per_class == 0 || self.practice_per_class == 0
        {
            return bad("per-class set sizes must be positive".into());
        }
        if !(self.finetune_lr > 0.0) || self.finetune_batch_size == 0 {
            return bad("finetune_lr and finetune_batch_size must be positive".into());
        }
        if !(0.0..=100.0).contains(&self.top5_threshold) {
            return bad(format!(
                "top5_threshold must lie in [0, 100] (got {})",
                self.top5_threshold
            ));
        }
        if let Some(t) = self.ood_threshold.filter(|t| !(0.0..=100.0).contains(t)) {
            return bad(format!("ood_threshold must lie in [0, 100] (got {t})"));
        }
        self.world_spec().validate()?;
        self.eval_world_spec().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Hash of every key except `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        config_hash(&c)
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.world_seed,
            num_classes: self.world_classes,
            num_scenes: self.world_scenes,
            frame_size: (self.frame_size, self.frame_size),
            ..WorldSpec::default()
        }
    }

    /// Same classes and geometry as the training world, different scenes.
    pub fn eval_world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.eval_world_seed,
            num_scenes: self.eval_world_scenes,
            ..self.world_spec()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let size = self.input_size;
        let (policy, multicrop) = match self.augment {
            AugmentPreset::Standard => (
                AugmentPolicy::temporal_classification(size),
                MultiCropSpec::scaled(size),
            ),
            AugmentPreset::Mild => (AugmentPolicy::mild(size), MultiCropSpec::mild(size)),
        };
        let defaults = DinoConfig::default();
        TrainConfig {
            algorithm: self.algorithm,
            backbone: BackboneSpec {
                input_size: size,
                embed_dim: self.embed_dim,
                ..BackboneSpec::default()
            },
            temporal: TemporalClassConfig {
                episode_length_s: self.episode_length_s,
                optimizer: OptimizerConfig::adam(self.lr),
                batch_size: self.batch_size,
                epochs: self.epochs,
                augment: policy,
            },
            dino: DinoConfig {
                teacher_momentum: (self.dino_teacher_momentum, 1.0),
                hidden_dim: self.dino_hidden_dim,
                bottleneck_dim: self.dino_bottleneck_dim,
                out_dim: self.dino_out_dim,
                optimizer: OptimizerConfig {
                    lr: self.lr,
                    ..defaults.optimizer
                },
                multicrop: MultiCropSpec {
                    n_local: self.dino_local_crops,
                    ..multicrop
                },
                batch_size: self.batch_size,
                epochs: self.epochs,
                ..defaults
            },
            early_stop: self.early_stop.then(EarlyStop::default),
            max_steps: self.max_steps,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            batch_size: self.finetune_batch_size,
            ..FinetuneConfig::default()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            max_steps: self.probe_max_steps,
            ..ProbeConfig::default()
        }
    }

    /// Short algorithm prefix used in condition names.
    pub fn algorithm_prefix(&self) -> &'static str {
        match self.algorithm {
            Algorithm::TemporalClassification => "tc",
            Algorithm::Dino => "dino",
        }
    }

    pub fn condition(&self, protocol: Protocol) -> String {
        format!("{}_{}", self.algorithm_prefix(), protocol.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml(
            "algorithm = \"dino\"\nrepeats = 1\nprotocols = [\"ood_practice\"]\n",
        )
        .unwrap();
        assert_eq!(c.algorithm, Algorithm::Dino);
        assert_eq!(c.repeats, 1);
        assert_eq!(c.fractions, vec![1.0, 0.1, 0.01, 0.001]);
        assert_eq!(c.protocols, vec![Protocol::OodPractice]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("fractoins = [1.0]").is_err());
    }

    #[test]
    fn fraction_rules() {
        for f in [vec![0.1, 1.0], vec![1.0, 1.0], vec![1.5], vec![0.0], vec![]] {
            let c = ExperimentConfig {
                fractions: f.clone(),
                ..Default::default()
            };
            assert!(c.validate().is_err(), "{f:?}");
        }
        let c = ExperimentConfig {
            repeats: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
