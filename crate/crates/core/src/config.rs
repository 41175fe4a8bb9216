//! Training configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! max_len = 128
//! vocab_size = 10000
//!
//! [schedule]
//! pretrain_g = 40
//! training_epochs = 30
//! ```
//!
//! Every field is optional; omitted fields keep their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::TieBreak;
use crate::error::{Error, Result};
use crate::generator::ClassPrior;
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length including `<start>` and `<end>`.
    pub max_len: usize,
    pub vocab_size: usize,
    pub z_dim: usize,
    pub embedding_dim: usize,
    pub gen_hidden: usize,
    pub gen_layers: usize,
    pub disc_hidden: usize,
    pub disc_layers: usize,
    pub cls_hidden: usize,
    pub cls_layers: usize,
    /// Variational dropout between recurrent layers.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            vocab_size: 10_000,
            z_dim: 50,
            embedding_dim: 50,
            gen_hidden: 1024,
            gen_layers: 2,
            disc_hidden: 512,
            disc_layers: 2,
            cls_hidden: 512,
            cls_layers: 2,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub gen_lr: f64,
    pub gen_weight_decay: f64,
    pub disc_lr: f64,
    pub disc_weight_decay: f64,
    pub cls_lr: f64,
    pub cls_weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            gen_lr: 1e-3,
            gen_weight_decay: 1e-7,
            disc_lr: 1e-4,
            disc_weight_decay: 1e-4,
            cls_lr: 1e-4,
            cls_weight_decay: 1e-4,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }

    pub fn generator(&self) -> AdamConfig {
        AdamConfig::new(self.gen_lr, self.gen_weight_decay, self.clip())
    }

    pub fn discriminator(&self) -> AdamConfig {
        AdamConfig::new(self.disc_lr, self.disc_weight_decay, self.clip())
    }

    pub fn classifier(&self) -> AdamConfig {
        AdamConfig::new(self.cls_lr, self.cls_weight_decay, self.clip())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    /// Entropy balance on generated sentences in the classifier loss.
    pub beta: f64,
    pub pretrain_g: usize,
    pub pretrain_d: usize,
    pub pretrain_c: usize,
    pub training_epochs: usize,
    pub g_adv_epochs: usize,
    pub g_mle_epochs: usize,
    pub d_epochs: usize,
    pub c_epochs: usize,
    /// Policy-gradient batches per adversarial generator epoch.
    pub g_adv_batches: usize,
    /// Added to the `T − t` advantage weight.
    pub alpha_offset: f64,
    pub reward_whitening: bool,
    pub temperature: f64,
    /// Average sentence scores over every position instead of content only.
    pub strict_all_positions: bool,
    pub tie_break: TieBreak,
    pub class_prior: [f64; 2],
    /// Write a checkpoint every k adversarial epochs (0 = never).
    pub checkpoint_every: usize,
    /// Fingerprint the frozen components around every update phase.
    pub verify_blocks: bool,
    /// Consecutive skipped (non-finite) updates before training aborts.
    pub max_consecutive_skips: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            beta: 1.0,
            pretrain_g: 40,
            pretrain_d: 10,
            pretrain_c: 20,
            training_epochs: 30,
            g_adv_epochs: 1,
            g_mle_epochs: 1,
            d_epochs: 1,
            c_epochs: 1,
            g_adv_batches: 8,
            alpha_offset: 0.0,
            reward_whitening: false,
            temperature: 1.0,
            strict_all_positions: false,
            tie_break: TieBreak::NonSpam,
            class_prior: [0.5, 0.5],
            checkpoint_every: 0,
            verify_blocks: true,
            max_consecutive_skips: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub labeled_path: Option<PathBuf>,
    pub unlabeled_path: Option<PathBuf>,
    pub test_fraction: f64,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    pub split_seed: u64,
    pub keep_unk: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labeled_path: None,
            unlabeled_path: None,
            test_fraction: 0.2,
            labeled_fraction: 1.0,
            unlabeled_fraction: 1.0,
            split_seed: 0,
            keep_unk: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn class_prior(&self) -> Result<ClassPrior> {
        ClassPrior::new(self.schedule.class_prior)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let s = &self.schedule;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.max_len < 3 {
            return bad(format!("model.max_len = {} (minimum 3)", m.max_len));
        }
        if m.vocab_size < 5 {
            return bad(format!("model.vocab_size = {} (minimum 5)", m.vocab_size));
        }
        if [m.embedding_dim, m.gen_hidden, m.disc_hidden, m.cls_hidden].contains(&0)
            || [m.gen_layers, m.disc_layers, m.cls_layers].contains(&0)
        {
            return bad("model dimensions and layer counts must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout = {} outside [0, 1)", m.dropout));
        }
        if s.batch_size == 0 {
            return bad("schedule.batch_size must be positive".into());
        }
        if !(s.beta >= 0.0) {
            return bad(format!("schedule.beta = {} must be non-negative", s.beta));
        }
        if !(s.temperature > 0.0) {
            return bad(format!("schedule.temperature = {} must be positive", s.temperature));
        }
        self.class_prior().map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optim;
        for (name, v) in [
            ("gen_lr", o.gen_lr),
            ("disc_lr", o.disc_lr),
            ("cls_lr", o.cls_lr),
            ("gen_weight_decay", o.gen_weight_decay),
            ("disc_weight_decay", o.disc_weight_decay),
            ("cls_weight_decay", o.cls_weight_decay),
            ("clip_norm", o.clip_norm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("optim.{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.model.max_len, 128);
        assert_eq!(c.model.vocab_size, 10_000);
        assert_eq!((c.model.gen_hidden, c.model.disc_hidden), (1024, 512));
        assert_eq!(c.model.embedding_dim, 50);
        assert_eq!(c.model.dropout, 0.5);
        assert_eq!((c.optim.gen_lr, c.optim.gen_weight_decay), (1e-3, 1e-7));
        assert_eq!((c.optim.disc_lr, c.optim.disc_weight_decay), (1e-4, 1e-4));
        assert_eq!(c.optim.clip_norm, 5.0);
        assert_eq!(c.schedule.beta, 1.0);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = TrainConfig::from_toml("seed = 3\n[schedule]\nbeta = 0.5\n[model]\nmax_len = 16\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.schedule.beta, 0.5);
        assert_eq!(c.model.max_len, 16);
        assert_eq!(c.schedule.batch_size, 32);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("[schedule]\nbeta = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("[schedule]\nclass_prior = [0.2, 0.2]\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nunknown_key = 1\n").is_err());
        assert!(TrainConfig::from_toml("[model]\ndropout = 1.0\n").is_err());
    }
}
