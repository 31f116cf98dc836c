//! Declarative experiment configuration: one TOML file, flag overrides win.
//! Every default matches the reference constants used by the training
//! pipeline, so an empty file is a valid full-scale configuration.

use crate::error::{CliError, CliResult};
use gazecloak_core::codec::AugmentParams;
use gazecloak_core::dataset::CsvSchema;
use gazecloak_core::models::TrainingSchedule;
use gazecloak_core::privacy::GanConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; part of the determinism contract.
    pub threads: usize,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub autoencoder: TrainingSchedule,
    pub classifier: TrainingSchedule,
    pub dql: TrainingSchedule,
    pub reward: RewardConfig,
    pub rl: RlConfig,
    pub dp: DpSection,
    pub gan: GanSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 2,
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            autoencoder: TrainingSchedule::autoencoder_default(),
            classifier: TrainingSchedule::classifier_default(),
            dql: TrainingSchedule::dql_default(),
            reward: RewardConfig::default(),
            rl: RlConfig::default(),
            dp: DpSection::default(),
            gan: GanSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// "synth" or a path to a gaze CSV.
    pub source: String,
    pub resolution: usize,
    pub schema: CsvSchema,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            resolution: 64,
            schema: CsvSchema::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub stimuli: usize,
    pub trials_per_pair: usize,
    pub signature_strength: f64,
    pub points_per_path: usize,
    pub curve_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 8,
            stimuli: 4,
            trials_per_pair: 30,
            signature_strength: 1.0,
            points_per_path: 32,
            curve_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub params: AugmentParams,
    /// Augmented copies per training record added to model training sets.
    pub copies: usize,
    /// Whether adaptation retraining also sees augmented copies.
    pub adapt_augment: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            params: AugmentParams::default(),
            copies: 2,
            adapt_augment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub keep: Vec<String>,
    pub hide: Vec<String>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            keep: vec!["stimulus".into()],
            hide: vec!["subject".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub iterations: u32,
    pub steps: usize,
    pub manip_batch: usize,
    pub replay_capacity: usize,
    /// Training images swept by the replay initialization.
    pub init_images: usize,
    pub y_start: f64,
    pub y_end: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub moving_avg_window: usize,
    pub moving_avg_tol: f64,
    /// Batches per DQL epoch; 0 covers the whole memory.
    pub dql_batches_per_epoch: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            steps: 1000,
            manip_batch: 32,
            replay_capacity: 200_000,
            init_images: 8,
            y_start: 0.9,
            y_end: 0.1,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
            moving_avg_window: 50,
            moving_avg_tol: 0.005,
            dql_batches_per_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for SweepRange {
    fn default() -> Self {
        Self {
            lo: 0.01,
            hi: 15.0,
            step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainChoice {
    Raw,
    Image,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSection {
    pub repetitions: usize,
    pub domain: DomainChoice,
    pub image: SweepRange,
    pub raw: SweepRange,
    /// Explicit per-pixel (image) or raw epsilon values; overrides the range
    /// when non-empty.
    pub image_values: Vec<f64>,
    pub raw_values: Vec<f64>,
    pub chance_tolerance: f64,
    /// Cap on evaluated test items; 0 means all.
    pub max_items: usize,
}

impl Default for DpSection {
    fn default() -> Self {
        Self {
            repetitions: 100,
            domain: DomainChoice::Both,
            image: SweepRange::default(),
            raw: SweepRange {
                lo: 10.0,
                hi: 500.0,
                step: 0.01,
            },
            image_values: Vec::new(),
            raw_values: Vec::new(),
            chance_tolerance: 0.03,
            max_items: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GanSection {
    #[serde(flatten)]
    pub gan: GanConfig,
}

impl Default for GanSection {
    fn default() -> Self {
        Self {
            gan: GanConfig::default(),
        }
    }
}

/// Flag overrides; flags win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid config: {e}")))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(iterations) = overrides.iterations {
            cfg.rl.iterations = iterations;
        }
        if let Some(steps) = overrides.steps {
            cfg.rl.steps = steps;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(threads) = overrides.threads {
            cfg.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        if self.dataset.resolution % 16 != 0 || self.dataset.resolution < 16 {
            return Err(CliError::Config(
                "resolution must be a positive multiple of 16".into(),
            ));
        }
        self.augment
            .params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for schedule in [&self.autoencoder, &self.classifier, &self.dql] {
            schedule
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.reward.keep.is_empty() || self.reward.hide.is_empty() {
            return Err(CliError::Config("reward keep/hide lists must be non-empty".into()));
        }
        Ok(())
    }

    /// Canonical serialized form; the basis of the config hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        hasher.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash over the sections a model checkpoint depends on. Pretrained
    /// models stay valid when only downstream knobs (rl budgets, dp, gan)
    /// change.
    pub fn training_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"training");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.threads.to_le_bytes());
        for section in [
            toml::to_string(&self.dataset).expect("serializes"),
            toml::to_string(&self.synth).expect("serializes"),
            toml::to_string(&self.augment).expect("serializes"),
            toml::to_string(&self.autoencoder).expect("serializes"),
            toml::to_string(&self.classifier).expect("serializes"),
        ] {
            hasher.update(section.as_bytes());
        }
        hasher.finalize().into()
    }

    /// Hash covering the seeded agent: training inputs plus the dql schedule,
    /// reward spec, and the seeding knobs.
    pub fn agent_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"agent");
        hasher.update(self.training_hash());
        hasher.update(toml::to_string(&self.dql).expect("serializes").as_bytes());
        hasher.update(toml::to_string(&self.reward).expect("serializes").as_bytes());
        hasher.update(self.rl.init_images.to_le_bytes());
        hasher.update(self.rl.replay_capacity.to_le_bytes());
        hasher.update(self.rl.y_start.to_le_bytes());
        hasher.update(self.rl.dql_batches_per_epoch.to_le_bytes());
        hasher.finalize().into()
    }

    /// Hash covering iteration checkpoints: everything the loop consumes.
    pub fn iter_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"iter");
        hasher.update(self.agent_hash());
        hasher.update(toml::to_string(&self.rl).expect("serializes").as_bytes());
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.autoencoder.initial_lr, 1e-2);
        assert_eq!(cfg.autoencoder.decay_every, 200);
        assert_eq!(cfg.autoencoder.batch_size, 40);
        assert_eq!(cfg.classifier.initial_lr, 1e-4);
        assert_eq!(cfg.classifier.decay_every, 500);
        assert_eq!(cfg.classifier.batch_size, 50);
        assert_eq!(cfg.classifier.stop_lr, 1e-7);
        assert!(cfg.dql.fixed_lr);
        assert_eq!(cfg.dql.initial_lr, 1e-4);
        assert_eq!(cfg.dql.weight_decay, 1e-5);
        assert_eq!(cfg.dql.batch_size, 100);
        assert_eq!(cfg.dql.max_epochs, Some(10));
        assert_eq!(cfg.rl.iterations, 20);
        assert_eq!(cfg.rl.steps, 1000);
        assert_eq!(cfg.dp.repetitions, 100);
        assert_eq!(cfg.dp.image.lo, 0.01);
        assert_eq!(cfg.dp.image.hi, 15.0);
        assert_eq!(cfg.dp.raw.lo, 10.0);
        assert_eq!(cfg.dp.raw.hi, 500.0);
        assert_eq!(cfg.augment.params.noise_max, 0.2);
        assert_eq!(cfg.augment.params.crop_min_fraction, 0.6);
        assert_eq!(cfg.augment.params.shift_max_fraction, 0.3);
        assert_eq!(cfg.gan.gan.pretrain_epochs, 100);
        assert_eq!(cfg.dataset.resolution, 64);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash_hex(), b.hash_hex());
        let mut c = ExperimentConfig::default();
        c.seed = 7;
        assert_ne!(a.hash_hex(), c.hash_hex());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.canonical_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.hash_hex(), back.hash_hex());
    }

    #[test]
    fn overrides_win() {
        let over = Overrides {
            seed: Some(9),
            iterations: Some(2),
            steps: Some(5),
            out: Some(PathBuf::from("/tmp/x")),
            threads: Some(1),
        };
        let cfg = ExperimentConfig::load(None, &over).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.rl.iterations, 2);
        assert_eq!(cfg.rl.steps, 5);
        assert_eq!(cfg.threads, 1);
    }
}
