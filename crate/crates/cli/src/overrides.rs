//! Per-key command-line overrides for the experiment config: every flat
//! config key has a matching `--kebab-case` flag layered over an optional
//! `--config` JSON file.

use std::path::PathBuf;

use clap::{Args, ValueEnum};

use bcd_core::config::{
    AttentionVariantConfig, ExperimentConfig, SupervisionVariantConfig,
};
use bcd_core::{Error, Result};

#[derive(Clone, Copy, ValueEnum)]
pub enum SupervisionVariantArg {
    Standard,
    OneHot,
    NoFiltration,
}

impl From<SupervisionVariantArg> for SupervisionVariantConfig {
    fn from(v: SupervisionVariantArg) -> Self {
        match v {
            SupervisionVariantArg::Standard => SupervisionVariantConfig::Standard,
            SupervisionVariantArg::OneHot => SupervisionVariantConfig::OneHot,
            SupervisionVariantArg::NoFiltration => SupervisionVariantConfig::NoFiltration,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AttentionVariantArg {
    Standard,
    PerImage,
    Shared,
}

impl From<AttentionVariantArg> for AttentionVariantConfig {
    fn from(v: AttentionVariantArg) -> Self {
        match v {
            AttentionVariantArg::Standard => AttentionVariantConfig::Standard,
            AttentionVariantArg::PerImage => AttentionVariantConfig::PerImage,
            AttentionVariantArg::Shared => AttentionVariantConfig::Shared,
        }
    }
}

#[derive(Args)]
pub struct ConfigOverrides {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub p_identities: Option<usize>,
    #[arg(long)]
    pub a_images: Option<usize>,
    #[arg(long)]
    pub input_height: Option<usize>,
    #[arg(long)]
    pub input_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub stage_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub subnet_width: Option<usize>,
    #[arg(long)]
    pub attention_reduction: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub random_erase_prob: Option<f64>,
    #[arg(long)]
    pub hflip_prob: Option<f64>,
    #[arg(long)]
    pub extra_stripe_subnets: Option<bool>,
    #[arg(long)]
    pub channel_attention: Option<bool>,
    #[arg(long)]
    pub supervision_loss: Option<bool>,
    #[arg(long)]
    pub part_reg: Option<bool>,
    #[arg(long)]
    pub holistic_reg: Option<bool>,
    #[arg(long, value_enum)]
    pub supervision_variant: Option<SupervisionVariantArg>,
    #[arg(long, value_enum)]
    pub attention_variant: Option<AttentionVariantArg>,
    #[arg(long)]
    pub hard_part_target: Option<bool>,
}

impl ConfigOverrides {
    /// Base config (file or defaults) with the given flags layered on top.
    /// The result is validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                ExperimentConfig::from_json(&raw)?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            seed,
            parts,
            beta,
            gamma,
            margin,
            lambda1,
            lambda2,
            p_identities,
            a_images,
            input_height,
            input_width,
            stage_channels,
            subnet_width,
            attention_reduction,
            epochs,
            learning_rate,
            lr_decay_epochs,
            lr_decay_factor,
            momentum,
            weight_decay,
            random_erase_prob,
            hflip_prob,
            extra_stripe_subnets,
            channel_attention,
            supervision_loss,
            part_reg,
            holistic_reg,
            hard_part_target,
        );
        if let Some(v) = self.supervision_variant {
            cfg.supervision_variant = v.into();
        }
        if let Some(v) = self.attention_variant {
            cfg.attention_variant = v.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
