//! Flat TOML configuration. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fci::FciSettings;
use crate::model::{ModelConfig, Stage};
use crate::objectives::LossWeights;
use crate::pci::PciInit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub device: String,
    /// Paired root (`low/`, `high/`) for fine-tuning; for pretraining either
    /// a paired root (its `high/` is used) or a flat image folder.
    pub data_dir: Option<PathBuf>,
    pub crop: usize,
    pub batch: usize,
    pub hflip: bool,

    pub lr: f64,
    /// `"constant"`, or `"cosine"` to anneal the generator rate from `lr` to
    /// `lr_min` over the stage's iteration count.
    pub lr_schedule: String,
    pub lr_min: f64,
    pub disc_lr: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub pretrain_iters: u64,
    pub finetune_iters: u64,
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,

    pub num_levels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub latent_dim: usize,
    pub norm_groups: usize,
    pub codebook_size: usize,

    pub beta: f64,
    pub tau: f64,
    pub theta_b_init: f64,
    pub theta_c_init: [f64; 2],
    pub alpha_init: f64,
    pub kappa_init: f64,
    pub lambda_ate: f64,
    pub mask_temperature: f64,

    pub disc_width: usize,
    pub extractor_widths: [usize; 4],
    /// Optional container with pretrained extractor weights.
    pub feature_weights: Option<PathBuf>,

    pub w_pix: f64,
    pub w_cp: f64,
    pub w_per: f64,
    pub w_adv: f64,
    pub w_causal: f64,

    pub use_pci_loss: bool,
    pub use_fci_loss: bool,
    pub use_hdrm: bool,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = m.backbone.clone();
        Self {
            seed: 0,
            device: "cpu".into(),
            data_dir: None,
            crop: 256,
            batch: 8,
            hflip: true,
            lr: 1e-4,
            lr_schedule: "constant".into(),
            lr_min: 0.0,
            disc_lr: 1e-4,
            adam_betas: [0.9, 0.99],
            adam_eps: 1e-8,
            pretrain_iters: 350_000,
            finetune_iters: 200_000,
            checkpoint_every: 5_000,
            disc_steps: 1,
            num_levels: b.num_levels,
            base_channels: b.base_channels,
            channel_mult: b.channel_mult,
            enc_blocks: b.enc_blocks,
            dec_blocks: b.dec_blocks,
            latent_dim: b.latent_dim,
            norm_groups: b.norm_groups,
            codebook_size: m.codebook_size,
            beta: m.beta,
            tau: m.tau,
            theta_b_init: m.pci.theta_b,
            theta_c_init: m.pci.theta_c,
            alpha_init: m.pci.alpha,
            kappa_init: m.fci.kappa_init,
            lambda_ate: m.fci.lambda_ate,
            mask_temperature: m.fci.mask_temperature,
            disc_width: m.disc_width,
            extractor_widths: m.extractor_widths,
            feature_weights: None,
            w_pix: m.weights.pix,
            w_cp: m.weights.cp,
            w_per: m.weights.per,
            w_adv: m.weights.adv,
            w_causal: m.weights.causal,
            use_pci_loss: true,
            use_fci_loss: true,
            use_hdrm: true,
        }
    }
}

impl Config {
    /// Small network for quick runs on a CPU: 64x64 crops, 3 levels, narrow
    /// widths, and a raised, annealed learning rate.
    pub fn toy() -> Self {
        Self {
            crop: 64,
            batch: 4,
            lr: 1e-3,
            lr_schedule: "cosine".into(),
            lr_min: 1e-5,
            disc_lr: 1e-4,
            pretrain_iters: 500,
            finetune_iters: 2000,
            checkpoint_every: 1000,
            num_levels: 3,
            base_channels: 12,
            channel_mult: vec![1, 2, 2],
            enc_blocks: 1,
            dec_blocks: 1,
            latent_dim: 16,
            norm_groups: 4,
            codebook_size: 128,
            disc_width: 8,
            extractor_widths: [8, 16, 16, 32],
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply a `key=value` override. The value is read as a TOML value, and
    /// as a plain string when that fails.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        table.insert(key.to_string(), parsed);
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Names of every accepted key.
    pub fn keys() -> Vec<String> {
        toml::Table::try_from(Self {
            data_dir: Some(PathBuf::new()),
            feature_weights: Some(PathBuf::new()),
            ..Self::default()
        })
        .expect("config serializes")
        .keys()
        .cloned()
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "device {:?} is not available; only \"cpu\"",
                self.device
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let f = 1usize << self.num_levels.min(20);
        if self.crop == 0 || !self.crop.is_multiple_of(f) || !self.crop.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "crop {} must be divisible by 2^num_levels = {f} and by 4",
                self.crop
            )));
        }
        if !(self.lr > 0.0) || !(self.disc_lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning rates and adam_eps must be positive".into()));
        }
        if !matches!(self.lr_schedule.as_str(), "constant" | "cosine") {
            return Err(Error::Config(format!(
                "lr_schedule {:?} is not \"constant\" or \"cosine\"",
                self.lr_schedule
            )));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return Err(Error::Config("lr_min must lie in [0, lr]".into()));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("adam_betas must lie in [0, 1)".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.model().backbone.validate()?;
        self.model().weights.validate()?;
        Ok(())
    }

    /// Iteration budget of a stage.
    pub fn stage_iters(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Pretrain => self.pretrain_iters,
            Stage::Finetune => self.finetune_iters,
        }
    }

    /// Generator learning rate for the step after `done` completed steps.
    pub fn lr_at(&self, stage: Stage, done: u64) -> f64 {
        if self.lr_schedule != "cosine" {
            return self.lr;
        }
        let total = self.stage_iters(stage).max(1);
        let t = (done as f64 / total as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                num_levels: self.num_levels,
                base_channels: self.base_channels,
                channel_mult: self.channel_mult.clone(),
                enc_blocks: self.enc_blocks,
                dec_blocks: self.dec_blocks,
                latent_dim: self.latent_dim,
                norm_groups: self.norm_groups,
            },
            codebook_size: self.codebook_size,
            beta: self.beta,
            tau: self.tau,
            pci: PciInit {
                theta_b: self.theta_b_init,
                theta_c: self.theta_c_init,
                alpha: self.alpha_init,
            },
            fci: FciSettings {
                kappa_init: self.kappa_init,
                lambda_ate: self.lambda_ate,
                mask_temperature: self.mask_temperature,
            },
            disc_width: self.disc_width,
            extractor_widths: self.extractor_widths,
            weights: LossWeights {
                pix: self.w_pix,
                cp: self.w_cp,
                per: self.w_per,
                adv: self.w_adv,
                causal: self.w_causal,
            },
            use_pci_loss: self.use_pci_loss,
            use_fci_loss: self.use_fci_loss,
            use_hdrm: self.use_hdrm,
        }
    }
}
