//! Experiment configuration: schedule, evaluation settings and presets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::AdamConfig;
use crate::attacks::AttackSpec;
use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::frontend::{BumpSpec, BumpVariant};
use crate::model::ArchConfig;

pub const DESK_TRAIN_SUBSET: usize = 10_000;
pub const DESK_EPOCHS: usize = 5;
pub const DESK_EVAL_SUBSET: usize = 1_000;
pub const FULL_EPOCHS: usize = 20;

/// One training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    /// Bump penalty; its center is the quantizer threshold.
    pub regularizer: Option<BumpVariant>,
    pub sigma: f64,
    pub frozen: bool,
    pub quantized: bool,
}

impl StageSpec {
    pub fn polarize_origin(epochs: usize, sigma: f64) -> Self {
        StageSpec {
            epochs,
            regularizer: Some(BumpVariant::Origin),
            sigma,
            frozen: false,
            quantized: false,
        }
    }

    pub fn polarize_thresholds(epochs: usize, sigma: f64) -> Self {
        StageSpec {
            regularizer: Some(BumpVariant::Thresholds),
            ..StageSpec::polarize_origin(epochs, sigma)
        }
    }

    pub fn finetune(epochs: usize) -> Self {
        StageSpec {
            epochs,
            regularizer: None,
            sigma: 0.0,
            frozen: true,
            quantized: true,
        }
    }

    /// Plain cross-entropy training of every parameter.
    pub fn plain(epochs: usize) -> Self {
        StageSpec {
            epochs,
            regularizer: None,
            sigma: 0.0,
            frozen: false,
            quantized: false,
        }
    }

    /// Bump coefficient at 1-based epoch `t`: `t/T`.
    pub fn lambda(&self, epoch: usize) -> f64 {
        if self.regularizer.is_none() || self.epochs == 0 {
            0.0
        } else {
            epoch as f64 / self.epochs as f64
        }
    }

    pub fn bump(&self, threshold: f64, epoch: usize) -> Option<BumpSpec> {
        let lambda = self.lambda(epoch);
        self.regularizer.map(|variant| match variant {
            BumpVariant::Origin => BumpSpec::origin(self.sigma, lambda),
            BumpVariant::Thresholds => BumpSpec::thresholds(self.sigma, threshold, lambda),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.regularizer.is_some() && !(self.sigma > 0.0) {
            return Err(Error::Config(format!("bump width {} must be positive", self.sigma)));
        }
        if self.regularizer.is_some() && self.frozen {
            return Err(Error::Config("a regularized stage cannot freeze the front end".into()));
        }
        if self.quantized && !self.frozen {
            return Err(Error::Config("a quantized stage must freeze the front end".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Seeded training subset size; `None` trains on the whole split.
    pub subset: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub stages: Vec<StageSpec>,
    /// Epochs of plain training for the undefended baseline.
    pub baseline_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub subset: Option<usize>,
    pub batch_size: usize,
    pub epsilon: f64,
    pub attacks: Vec<AttackSpec>,
    pub sweep: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Small-budget preset: 10k training subset, 5 epochs per stage,
    /// 1k evaluation subset, PGD 3×20.
    pub fn desk(dataset: DatasetName) -> Self {
        let (threshold, epsilon) = dataset_defaults(dataset);
        let stages = vec![
            StageSpec::polarize_origin(DESK_EPOCHS, 0.35),
            StageSpec::polarize_thresholds(DESK_EPOCHS, 0.15),
            StageSpec::finetune(DESK_EPOCHS),
        ];
        ExperimentConfig {
            dataset,
            seed: 0,
            arch: ArchConfig {
                threshold,
                ..ArchConfig::default()
            },
            train: TrainConfig {
                subset: Some(DESK_TRAIN_SUBSET),
                batch_size: 128,
                adam: AdamConfig::default(),
                baseline_epochs: 3 * DESK_EPOCHS,
                stages,
            },
            eval: EvalConfig {
                subset: Some(DESK_EVAL_SUBSET),
                batch_size: 100,
                epsilon,
                attacks: vec![
                    AttackSpec::fgsm(epsilon),
                    AttackSpec::bim(epsilon),
                    AttackSpec::pgd(epsilon, 3, 20),
                ],
                sweep: epsilon_grid(epsilon),
            },
        }
    }

    /// Full preset: whole splits, 20 epochs per stage, PGD 20×100.
    pub fn full(dataset: DatasetName) -> Self {
        let mut cfg = ExperimentConfig::desk(dataset);
        cfg.train.subset = None;
        cfg.train.baseline_epochs = 3 * FULL_EPOCHS;
        for s in &mut cfg.train.stages {
            s.epochs = FULL_EPOCHS;
        }
        cfg.eval.subset = None;
        let eps = cfg.eval.epsilon;
        cfg.eval.attacks = vec![
            AttackSpec::fgsm(eps),
            AttackSpec::bim(eps),
            AttackSpec::pgd(eps, 20, 100),
        ];
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for a in &mut self.eval.attacks {
            a.seed = seed;
        }
        self
    }

    /// Sets the attack budget everywhere it appears (step sizes follow `ε/10`).
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.eval.epsilon = epsilon;
        for a in &mut self.eval.attacks {
            a.epsilon = epsilon;
            a.step_size = match a.family {
                crate::attacks::AttackFamily::Fgsm => epsilon,
                _ => epsilon / 10.0,
            };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        validate_schedule(&self.train.stages, self.arch.front_end)?;
        for a in &self.eval.attacks {
            a.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.eval.sweep.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("sweep grid must be sorted ascending".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn fingerprint(&self) -> String {
        let text = self.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Quantizer threshold and attack budget for each dataset.
pub fn dataset_defaults(dataset: DatasetName) -> (f64, f64) {
    match dataset {
        DatasetName::Mnist => (0.5, 0.3),
        DatasetName::Fashion => (0.3, 0.1),
    }
}

fn epsilon_grid(max: f64) -> Vec<f64> {
    (0..=6).map(|i| max * i as f64 / 6.0).collect()
}

/// Checks the three-stage polarize / polarize / fine-tune structure for a
/// defended network, or a single unregularized stage for the baseline.
pub fn validate_schedule(stages: &[StageSpec], front_end: bool) -> Result<()> {
    for s in stages {
        s.validate()?;
    }
    if !front_end {
        if stages.iter().any(|s| s.regularizer.is_some() || s.quantized) {
            return Err(Error::Config(
                "the undefended network has no front end to regularize".into(),
            ));
        }
        return Ok(());
    }
    let ok = stages.len() == 3
        && stages[0].regularizer == Some(BumpVariant::Origin)
        && !stages[0].frozen
        && !stages[0].quantized
        && stages[1].regularizer == Some(BumpVariant::Thresholds)
        && !stages[1].frozen
        && !stages[1].quantized
        && stages[2].regularizer.is_none()
        && stages[2].frozen
        && stages[2].quantized;
    if !ok {
        return Err(Error::Config(
            "schedule must be: origin bump (unfrozen), threshold bump (unfrozen), frozen quantized fine-tuning".into(),
        ));
    }
    Ok(())
}
