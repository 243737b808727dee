//! Experiment configuration: every knob, serialized verbatim into each
//! run directory as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, HostConfig};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::pmsa::PmsaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Pixel size of the square canvas.
    pub image_size: usize,
    /// Spatial factor between image and latent grid.
    pub latent_factor: usize,
    pub latent_channels: usize,

    /// PMSA depth (number of ViT blocks).
    pub depth: usize,
    /// Patch size over the latent grid.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Gaussian std for mask dilation.
    pub sigma: f64,
    /// Dilation kernel schedule, coarsest first; length must equal depth.
    pub kernels: Vec<usize>,
    /// Pose-mask guidance strength.
    pub alpha: f64,
    pub encoder_widths: [usize; 6],
    /// Columns-only attention mask expansion.
    pub strict_caption: bool,

    pub host_width: usize,
    pub host_embed_dim: usize,
    pub num_styles: usize,

    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_steps: usize,

    pub lr: f64,
    pub batch: usize,
    pub pretrain_epochs: usize,
    pub adapter_epochs: usize,
    pub style_dropout: f64,

    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,

    /// Line width of rendered conditioning pose images.
    pub pose_line_width: usize,
    /// Line width of limbs in synthetic target images.
    pub target_line_width: usize,

    pub mask_in_pmsa: bool,
    pub mask_in_loss: bool,
    pub mask_at_inference: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            latent_factor: 8,
            latent_channels: 3,
            depth: 2,
            patch: 2,
            embed_dim: 32,
            heads: 1,
            dropout: 0.0,
            sigma: 3.0,
            kernels: vec![23, 13],
            alpha: 5.0,
            encoder_widths: [4, 8, 12, 12, 12, 12],
            strict_caption: false,
            host_width: 16,
            host_embed_dim: 32,
            num_styles: 8,
            t_max: 200,
            beta_start: 1e-3,
            beta_end: 0.05,
            sampler_steps: 50,
            lr: 1e-3,
            batch: 8,
            pretrain_epochs: 6,
            adapter_epochs: 2,
            style_dropout: 0.5,
            train_size: 2000,
            eval_size: 200,
            seed: 17,
            pose_line_width: 1,
            target_line_width: 5,
            mask_in_pmsa: true,
            mask_in_loss: true,
            mask_at_inference: true,
        }
    }
}

impl ExperimentConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.latent_factor != 0 {
            return Err(Error::Config(format!(
                "latent factor {} does not divide image size {}",
                self.latent_factor, self.image_size
            )));
        }
        let ls = self.latent_size();
        if self.patch == 0 || ls % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide latent grid {ls}",
                self.patch
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        self.adapter_config().validate()?;
        DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)?;
        if self.sampler_steps == 0 || self.sampler_steps > self.t_max {
            return Err(Error::Config(format!(
                "sampler steps {} outside [1, {}]",
                self.sampler_steps, self.t_max
            )));
        }
        if self.batch == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch and dataset sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.style_dropout) {
            return Err(Error::Config("style dropout must be in [0, 1)".into()));
        }
        if self.num_styles == 0 {
            return Err(Error::Config("need at least one style".into()));
        }
        if self.pose_line_width == 0 || self.target_line_width == 0 {
            return Err(Error::Config("line widths must be positive".into()));
        }
        Ok(())
    }

    pub fn pmsa_config(&self) -> PmsaConfig {
        PmsaConfig {
            depth: self.depth,
            patch: self.patch,
            embed_dim: self.embed_dim,
            heads: self.heads,
            dropout: self.dropout,
            residual: true,
            strict_caption: self.strict_caption,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            pmsa: self.pmsa_config(),
            sigma: self.sigma,
            kernels: self.kernels.clone(),
            alpha: self.alpha,
            encoder_widths: self.encoder_widths,
        }
    }

    pub fn host_config(&self) -> HostConfig {
        HostConfig {
            latent_channels: self.latent_channels,
            latent_size: self.latent_size(),
            base_width: self.host_width,
            sin_dim: 16,
            embed_dim: self.host_embed_dim,
            num_styles: self.num_styles,
        }
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)
            .expect("validated schedule")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}
