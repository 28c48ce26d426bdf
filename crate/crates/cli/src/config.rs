use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use latentkf::data::InitialLaw;
use latentkf::encoder::{EncoderTrainConfig, PriorMode};
use latentkf::pipeline::{default_prior_sigma, TrainSchedule};
use latentkf::ssm::{LorenzConfig, Model, SsModelSpec};
use latentkf_autodiff::{ExecMode, LrSchedule, OptimizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever a change invalidates cached checkpoints or metrics.
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pendulum,
    Lorenz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
pub enum Variant {
    #[value(name = "encoder")]
    #[serde(rename = "encoder")]
    Encoder,
    #[value(name = "encoder+prior")]
    #[serde(rename = "encoder+prior")]
    EncoderPrior,
    #[value(name = "encoder+prior+ekf")]
    #[serde(rename = "encoder+prior+ekf")]
    EncoderPriorEkf,
    #[value(name = "latent-kalmannet")]
    #[serde(rename = "latent-kalmannet")]
    LatentKalmanNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Encoder,
        Variant::EncoderPrior,
        Variant::EncoderPriorEkf,
        Variant::LatentKalmanNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Encoder => "encoder",
            Variant::EncoderPrior => "encoder+prior",
            Variant::EncoderPriorEkf => "encoder+prior+ekf",
            Variant::LatentKalmanNet => "latent-kalmannet",
        }
    }

    pub fn needs_prior_encoder(self) -> bool {
        self != Variant::Encoder
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// How the filters' model differs from the one that generated the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    #[default]
    None,
    /// Lorenz only: data from order `true_j`, filters use `train_j`.
    Taylor { train_j: usize, true_j: usize },
    /// Data simulated at `dt / ratio` and sub-sampled.
    Decimation { ratio: usize },
}

/// Update rule for every training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    /// Plain gradient steps with weight decay.
    #[default]
    Sgd,
    Adam,
}

/// Dataset sizes and optimization budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    /// Trajectories in the training dataset (split 80/10/10).
    pub count: usize,
    /// Separately generated test trajectories.
    pub test_count: usize,
    pub encoder_epochs: usize,
    pub encoder_batch: usize,
    pub encoder_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gain_lr: f64,
    pub finetune_lr: f64,
    /// `λ` of the `λ‖Θ‖²` penalty in every phase.
    pub weight_decay: f64,
    pub optimizer: OptimizerChoice,
    pub lr_schedule: LrSchedule,
    pub bptt_window: Option<usize>,
}

impl Scale {
    /// Learning rates tuned for the adaptive update rule.
    pub fn with_adam(self) -> Self {
        Self {
            encoder_lr: 1e-3,
            gain_lr: 3e-3,
            finetune_lr: 1e-4,
            weight_decay: 0.0,
            optimizer: OptimizerChoice::Adam,
            ..self
        }
    }

    pub fn optimizer(&self, lr: f64) -> OptimizerConfig {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerConfig::sgd(lr, self.weight_decay),
            OptimizerChoice::Adam => OptimizerConfig::adam(lr, self.weight_decay),
        }
    }

    pub fn desk() -> Self {
        Self {
            count: 200,
            test_count: 100,
            encoder_epochs: 20,
            encoder_batch: 64,
            encoder_lr: 0.05,
            epochs: 20,
            batch_size: 16,
            gain_lr: 0.05,
            finetune_lr: 5e-4,
            weight_decay: 1e-5,
            optimizer: OptimizerChoice::Sgd,
            lr_schedule: LrSchedule::Cosine { floor: 0.05 },
            bptt_window: None,
        }
    }

    pub fn full() -> Self {
        Self {
            count: 1000,
            test_count: 100,
            encoder_epochs: 40,
            epochs: 50,
            ..Self::desk()
        }
    }
}

/// One cell of an experiment: a model, a noise level, a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub noise_level: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub mismatch: Mismatch,
    pub seed: u64,
    pub scale: Scale,
}

impl ExperimentConfig {
    pub fn new(model: ModelKind, noise_level: f64, seed: u64, full_scale: bool) -> Self {
        let (scale, t) = if full_scale {
            (Scale::full(), 200)
        } else {
            (Scale::desk(), 100)
        };
        Self {
            model,
            noise_level,
            t_train: t,
            t_test: t,
            mismatch: Mismatch::None,
            seed,
            scale,
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self.model {
            ModelKind::Pendulum => "pendulum",
            ModelKind::Lorenz => "lorenz",
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.t_train >= 2 && self.t_test >= 2, "trajectories need at least two steps");
        anyhow::ensure!(self.scale.count >= 10, "need at least 10 training trajectories");
        anyhow::ensure!(self.scale.test_count >= 1, "need at least one test trajectory");
        match self.mismatch {
            Mismatch::Taylor { train_j, true_j } => {
                anyhow::ensure!(self.model == ModelKind::Lorenz, "Taylor mismatch applies to the Lorenz model");
                anyhow::ensure!(train_j >= 1 && true_j >= 1, "Taylor orders must be positive");
            }
            Mismatch::Decimation { ratio } => anyhow::ensure!(ratio >= 1, "decimation ratio must be positive"),
            Mismatch::None => {}
        }
        self.data_spec().validate()?;
        Ok(())
    }

    /// The model that generates the data.
    pub fn data_spec(&self) -> SsModelSpec {
        match self.model {
            ModelKind::Pendulum => SsModelSpec::pendulum(self.noise_level),
            ModelKind::Lorenz => {
                let j = match self.mismatch {
                    Mismatch::Taylor { true_j, .. } => true_j,
                    _ => LorenzConfig::default().j,
                };
                SsModelSpec::lorenz(
                    self.noise_level,
                    LorenzConfig {
                        j,
                        ..LorenzConfig::default()
                    },
                )
            }
        }
    }

    /// The dynamics assumed by every filter.
    pub fn filter_model(&self) -> Model {
        match (self.mismatch, self.data_spec().model) {
            (Mismatch::Taylor { train_j, .. }, Model::Lorenz(c)) => Model::Lorenz(LorenzConfig { j: train_j, ..c }),
            (_, m) => m,
        }
    }

    pub fn decimation(&self) -> Option<usize> {
        match self.mismatch {
            Mismatch::Decimation { ratio } => Some(ratio),
            _ => None,
        }
    }

    pub fn x0_law(&self) -> InitialLaw {
        InitialLaw::for_spec(&self.data_spec())
    }

    pub fn encoder_config(&self, with_prior: bool) -> EncoderTrainConfig {
        let spec = self.data_spec();
        EncoderTrainConfig {
            epochs: self.scale.encoder_epochs,
            batch_size: self.scale.encoder_batch,
            optimizer: self.scale.optimizer(self.scale.encoder_lr),
            prior: if with_prior {
                PriorMode::NoisyGroundTruth {
                    sigma: default_prior_sigma(&spec),
                }
            } else {
                PriorMode::None
            },
            seed: self.seed.wrapping_mul(31).wrapping_add(if with_prior { 2 } else { 1 }),
            lr_schedule: self.scale.lr_schedule,
            select_best: true,
        }
    }

    pub fn schedule(&self, exec: ExecMode) -> TrainSchedule {
        TrainSchedule {
            warm_start: self.encoder_config(true),
            epochs: self.scale.epochs,
            batch_size: self.scale.batch_size,
            gain_optimizer: self.scale.optimizer(self.scale.gain_lr),
            encoder_optimizer: self.scale.optimizer(self.scale.finetune_lr),
            clip_norm: 10.0,
            bptt_window: self.scale.bptt_window,
            seed: self.seed.wrapping_mul(31).wrapping_add(3),
            select_best: true,
            freeze_bn_stats: true,
            lr_schedule: self.scale.lr_schedule,
            exec,
        }
    }

    pub fn test_seed(&self) -> u64 {
        self.seed ^ 0x7e57_da7a
    }

    /// Hash of the whole configuration, as written to `metrics.csv`.
    pub fn config_hash(&self) -> String {
        hash_of(&(CACHE_VERSION, self))
    }

    /// Key of the training dataset.
    pub fn data_key(&self) -> String {
        hash_of(&(
            CACHE_VERSION,
            "data",
            self.data_spec(),
            self.decimation(),
            self.scale.count,
            self.t_train,
            self.seed,
        ))
    }

    /// Key of the test dataset.
    pub fn test_key(&self) -> String {
        hash_of(&(
            CACHE_VERSION,
            "test",
            self.data_spec(),
            self.decimation(),
            self.scale.test_count,
            self.t_test,
            self.test_seed(),
        ))
    }

    pub fn encoder_key(&self, with_prior: bool) -> String {
        hash_of(&(CACHE_VERSION, "encoder", self.data_key(), self.encoder_config(with_prior)))
    }

    pub fn pipeline_key(&self) -> String {
        hash_of(&(
            CACHE_VERSION,
            "pipeline",
            self.encoder_key(true),
            self.filter_model(),
            self.schedule(ExecMode::default()),
        ))
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
pub fn hash_of<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("kalman".parse::<Variant>().is_err());
    }

    #[test]
    fn taylor_mismatch_only_changes_the_filter_model() {
        let mut cfg = ExperimentConfig::new(ModelKind::Lorenz, 2.0, 0, false);
        let base_data = cfg.data_key();
        let base_enc = cfg.encoder_key(true);
        let base_pipe = cfg.pipeline_key();
        cfg.mismatch = Mismatch::Taylor { train_j: 2, true_j: 5 };
        assert_eq!(cfg.data_key(), base_data);
        assert_eq!(cfg.encoder_key(true), base_enc);
        assert_ne!(cfg.pipeline_key(), base_pipe);
        assert_eq!(cfg.filter_model(), Model::Lorenz(LorenzConfig { j: 2, dt: 0.02 }));
    }

    #[test]
    fn test_length_does_not_touch_training_keys() {
        let mut cfg = ExperimentConfig::new(ModelKind::Pendulum, 23.0, 4, false);
        let keys = (cfg.data_key(), cfg.pipeline_key(), cfg.test_key(), cfg.config_hash());
        cfg.t_test = 1000;
        assert_eq!(cfg.data_key(), keys.0);
        assert_eq!(cfg.pipeline_key(), keys.1);
        assert_ne!(cfg.test_key(), keys.2);
        assert_ne!(cfg.config_hash(), keys.3);
    }

    #[test]
    fn default_schedules_use_plain_sgd() {
        let cfg = ExperimentConfig::new(ModelKind::Lorenz, 2.0, 0, true);
        let sched = cfg.schedule(ExecMode::Sequential);
        for opt in [sched.warm_start.optimizer, sched.gain_optimizer, sched.encoder_optimizer] {
            assert_eq!(opt.kind, latentkf_autodiff::OptimizerKind::Sgd { momentum: 0.0 });
            assert!(opt.weight_decay > 0.0);
        }
        let adam = Scale::desk().with_adam();
        assert!(matches!(adam.optimizer(1e-3).kind, latentkf_autodiff::OptimizerKind::Adam { .. }));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(hash_of(&(1, "a")), hash_of(&(1, "a")));
        assert_eq!(hash_of(&0u8).len(), 16);
    }
}
