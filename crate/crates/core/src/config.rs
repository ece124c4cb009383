//! Run configuration: a TOML document layered over one of two named
//! profiles, then resolved into concrete model, schedule and seed settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discretizer::{FeatureProfile, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluator::TrainingRegime;
use crate::model::ModelConfig;
use crate::sequence::{BatchOrder, MaskingPolicy};
use crate::synthgen::SynthConfig;
use crate::trainer::{AdamConfig, TrainOptions, TrainSchedule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Published hyperparameters.
    Paper,
    /// Scaled down for a single CPU.
    #[default]
    Desk,
}

/// Values a profile fixes unless the config overrides them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileDefaults {
    pub per_feature_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub test_seq_len: usize,
    pub batch_size: usize,
    pub stages: (usize, usize, usize),
    pub learning_rate: f64,
    pub micro_batch: Option<usize>,
}

impl Profile {
    pub fn defaults(self) -> ProfileDefaults {
        match self {
            Profile::Paper => ProfileDefaults {
                per_feature_dim: 128,
                layers: 1,
                heads: 1,
                seq_len: 128,
                test_seq_len: 1024,
                batch_size: 512,
                stages: (400, 1100, 400),
                learning_rate: 1e-5,
                // 16 × 128 flows per pass keeps activations in the tens of megabytes
                micro_batch: Some(16),
            },
            Profile::Desk => ProfileDefaults {
                per_feature_dim: 16,
                layers: 1,
                heads: 1,
                seq_len: 64,
                // isolation spacing in synthetic corpora equals the training window
                test_seq_len: 64,
                batch_size: 32,
                stages: (100, 200, 100),
                learning_rate: 2e-3,
                micro_batch: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            cache: "cache".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsConfig {
    /// Relative paths are taken relative to `base`.
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.cache, &mut self.checkpoints, &mut self.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    /// `full7` or `six-drop-<feature>`.
    pub feature_profile: Option<String>,
    pub per_feature_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub mlm_pretrain: Option<usize>,
    pub head_only: Option<usize>,
    pub joint: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOverrides {
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub test_seq_len: Option<usize>,
    pub learning_rate: Option<f64>,
    pub micro_batch: Option<usize>,
    /// Permute whole sequences between epochs; flow order inside a
    /// sequence is never changed.
    pub shuffle: Option<bool>,
    pub regime: Option<TrainingRegime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub mask_probability: f64,
    pub replace_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        let p = MaskingPolicy::default();
        MaskingConfig {
            mask_probability: p.mask_probability,
            replace_fraction: p.replace_fraction,
            random_fraction: p.random_fraction,
            keep_fraction: p.keep_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Base seed; every named seed is derived from it.
    pub seed: u64,
    /// When false, the base seed is mixed with the clock.
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub model: ModelOverrides,
    pub schedule: ScheduleOverrides,
    pub training: TrainingOverrides,
    pub masking: MaskingConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            deterministic: true,
            paths: PathsConfig::default(),
            model: ModelOverrides::default(),
            schedule: ScheduleOverrides::default(),
            training: TrainingOverrides::default(),
            masking: MaskingConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Named seeds, one per source of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub base: u64,
    pub init: u64,
    pub masking: u64,
    pub shuffle: u64,
    pub classifier: u64,
    pub balance: u64,
    pub synth: u64,
}

impl Seeds {
    pub fn derive(base: u64) -> Self {
        let named = |role: &str| {
            let h = Sha256::new().chain_update(base.to_le_bytes()).chain_update(role.as_bytes()).finalize();
            u64::from_le_bytes(h[..8].try_into().unwrap())
        };
        Seeds {
            base,
            init: named("init"),
            masking: named("masking"),
            shuffle: named("shuffle"),
            classifier: named("classifier"),
            balance: named("balance"),
            synth: named("synth"),
        }
    }

    pub fn named(&self) -> [(&'static str, u64); 7] {
        [
            ("base", self.base),
            ("init", self.init),
            ("masking", self.masking),
            ("shuffle", self.shuffle),
            ("classifier", self.classifier),
            ("balance", self.balance),
            ("synth", self.synth),
        ]
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub profile: Profile,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub train: TrainOptions,
    pub seq_len: usize,
    pub test_seq_len: usize,
    pub masking: MaskingPolicy,
    pub regime: TrainingRegime,
    pub seeds: Seeds,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<RunSettings> {
        let d = self.profile.defaults();
        let feature_profile = match &self.model.feature_profile {
            Some(id) => FeatureProfile::parse_id(id)?,
            None => FeatureProfile::Full,
        };
        let vocab = Vocabulary::new(feature_profile);
        let mut model = ModelConfig::for_vocab(
            &vocab,
            self.model.per_feature_dim.unwrap_or(d.per_feature_dim),
            self.model.layers.unwrap_or(d.layers),
            self.model.heads.unwrap_or(d.heads),
        );
        if let Some(ffn) = self.model.ffn_dim {
            model.ffn_dim = ffn;
        }
        model.validate()?;

        let schedule = TrainSchedule::with_counts(
            self.schedule.mlm_pretrain.unwrap_or(d.stages.0),
            self.schedule.head_only.unwrap_or(d.stages.1),
            self.schedule.joint.unwrap_or(d.stages.2),
        );
        schedule.validate()?;

        let base = if self.deterministic {
            self.seed
        } else {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |t| t.as_nanos() as u64);
            self.seed ^ nanos
        };
        let seeds = Seeds::derive(base);

        let t = &self.training;
        let adam = AdamConfig {
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            ..AdamConfig::default()
        };
        adam.validate()?;
        let train = TrainOptions {
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            adam,
            order: if t.shuffle.unwrap_or(true) {
                BatchOrder::Shuffled(seeds.shuffle)
            } else {
                BatchOrder::Sequential
            },
            micro_batch: t.micro_batch.or(d.micro_batch),
            seed: seeds.classifier,
        };
        let seq_len = t.seq_len.unwrap_or(d.seq_len);
        let test_seq_len = t.test_seq_len.unwrap_or(d.test_seq_len);
        if train.batch_size == 0 || seq_len == 0 || test_seq_len == 0 || train.micro_batch == Some(0) {
            return Err(Error::Config("batch size, sequence lengths and micro-batch must be positive".into()));
        }

        let m = self.masking;
        let masking = MaskingPolicy {
            mask_probability: m.mask_probability,
            replace_fraction: m.replace_fraction,
            random_fraction: m.random_fraction,
            keep_fraction: m.keep_fraction,
            seed: seeds.masking,
        };
        masking.validate()?;

        let mut synth = self.synth.clone();
        synth.seed = seeds.synth;
        synth.validate()?;

        Ok(RunSettings {
            profile: self.profile,
            vocab,
            model,
            schedule,
            train,
            seq_len,
            test_seq_len,
            masking,
            regime: t.regime.unwrap_or(TrainingRegime::Full),
            seeds,
            paths: self.paths.clone(),
            synth,
        })
    }
}
