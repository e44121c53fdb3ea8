//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{AttackSpec, Norm, TrainSchedule};
use crate::anomaly::AnomalyConfig;
use crate::architectures::ArchId;
use crate::data::{DatasetKind, DatasetSource, Split};
use crate::denoising::DenoiserTraining;
use crate::error::{Error, Result};
use crate::inversion::{LossMode, LossWeights, TrainConfig};

/// PGD settings shared by every cell of a robustness grid; only the radius varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackGrid {
    pub norm: Norm,
    pub eps: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: vec![0.0, 8.0 / 255.0],
            steps: 10,
            step_size: 2.0 / 255.0,
            random_start: true,
        }
    }
}

impl AttackGrid {
    /// Attack for one grid radius; a zero radius means standard training.
    pub fn spec(&self, eps: f64) -> AttackSpec {
        if eps == 0.0 {
            return AttackSpec::none();
        }
        AttackSpec {
            norm: self.norm,
            eps,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub arch: ArchId,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train_data: DatasetSource,
    pub test_data: DatasetSource,
    pub attack: AttackGrid,
    pub encoder: TrainSchedule,
    pub decoder: TrainConfig,
    pub weights: LossWeights,
    pub denoiser: DenoiserTraining,
    pub anomaly: AnomalyConfig,
    /// Upscaling factors for the scale sweep.
    pub scales: Vec<usize>,
    pub eval_batch_size: usize,
    /// Held-out samples used for robust accuracy (PGD is expensive).
    pub robust_eval_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cifar = |split, limit| DatasetSource {
            kind: DatasetKind::Cifar10Binary,
            path: PathBuf::from("cifar-10-batches-bin"),
            split,
            limit,
            ..DatasetSource::default()
        };
        Self {
            id: "desk".into(),
            arch: ArchId::Tiny32,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/desk"),
            train_data: cifar(Split::Train, Some(10_000)),
            test_data: cifar(Split::Test, Some(1_000)),
            attack: AttackGrid::default(),
            encoder: TrainSchedule {
                epochs: 20,
                batch_size: 128,
                decay_every: 0,
                ..TrainSchedule::default()
            },
            decoder: TrainConfig {
                epochs: 20,
                decay_every: 0,
                mode: LossMode::PixFeat,
                ..TrainConfig::default()
            },
            weights: LossWeights::default(),
            denoiser: DenoiserTraining {
                train: TrainConfig {
                    epochs: 20,
                    decay_every: 0,
                    mode: LossMode::PixFeat,
                    ..TrainConfig::default()
                },
                ..DenoiserTraining::default()
            },
            anomaly: AnomalyConfig::default(),
            scales: vec![1, 2, 3],
            eval_batch_size: 100,
            robust_eval_samples: 1_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map(|s| s.start).unwrap_or(0),
            msg: format!("config: {}", e.message()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack.eps.is_empty() {
            return Err(Error::Config("attack grid is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.scales.contains(&0) {
            return Err(Error::Config("upscaling factors must be >= 1".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval batch size must be >= 1".into()));
        }
        for &eps in &self.attack.eps {
            self.attack.spec(eps).validate()?;
        }
        self.decoder.validate()?;
        self.weights.validate()?;
        self.anomaly.validate()?;
        self.denoiser.noise.validate()?;
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical TOML form; stamped on every CSV row.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_else(|_| format!("{self:?}"));
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("id = \"x\"\nseeds = [4]\n[attack]\neps = [0.0, 0.25]\n").unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.attack.eps, vec![0.0, 0.25]);
        assert_eq!(cfg.attack.steps, 10);
        assert_eq!(cfg.decoder.gen_lr, 3e-4);
        assert_eq!(cfg.weights.feat, 1e-2);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seeds: vec![9],
            ..a.clone()
        };
        assert_eq!(a.hash().len(), 16);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "[attack]\neps = []\n",
            "seeds = []\n",
            "scales = [0]\n",
            "unknown_key = 1\n",
            "[attack]\neps = [-1.0]\n",
            "id = \n",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn zero_radius_cell_is_standard_training() {
        assert!(AttackGrid::default().spec(0.0).is_identity());
        assert!(!AttackGrid::default().spec(0.1).is_identity());
    }
}
