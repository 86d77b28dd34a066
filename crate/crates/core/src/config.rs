//! Experiment configuration: one flat JSON object holding every
//! hyperparameter, ablation toggle, and variant selector. Unknown keys are
//! rejected so a misspelled toggle cannot silently change which model runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::bcca::AttentionVariant;
use crate::error::{Error, Result};
use crate::spatial::gamma_band;
use crate::supervision::SupervisionVariant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionVariantConfig {
    #[default]
    Standard,
    OneHot,
    NoFiltration,
}

impl From<SupervisionVariantConfig> for SupervisionVariant {
    fn from(v: SupervisionVariantConfig) -> Self {
        match v {
            SupervisionVariantConfig::Standard => SupervisionVariant::Standard,
            SupervisionVariantConfig::OneHot => SupervisionVariant::OneHot,
            SupervisionVariantConfig::NoFiltration => SupervisionVariant::NoFiltration,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariantConfig {
    #[default]
    Standard,
    PerImage,
    Shared,
}

impl From<AttentionVariantConfig> for AttentionVariant {
    fn from(v: AttentionVariantConfig) -> Self {
        match v {
            AttentionVariantConfig::Standard => AttentionVariant::Standard,
            AttentionVariantConfig::PerImage => AttentionVariant::PerImage,
            AttentionVariantConfig::Shared => AttentionVariant::Shared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of body parts K.
    pub parts: usize,
    /// Filtration threshold for the supervision matrix.
    pub beta: f64,
    /// On-part amplitude of the part-level spatial target.
    pub gamma: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the attention supervision losses.
    pub lambda1: f64,
    /// Weight of the spatial regularizers.
    pub lambda2: f64,
    pub p_identities: usize,
    pub a_images: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stage_channels: Vec<usize>,
    pub subnet_width: usize,
    pub attention_reduction: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub random_erase_prob: f64,
    pub hflip_prob: f64,
    pub extra_stripe_subnets: bool,
    pub channel_attention: bool,
    pub supervision_loss: bool,
    pub part_reg: bool,
    pub holistic_reg: bool,
    pub supervision_variant: SupervisionVariantConfig,
    pub attention_variant: AttentionVariantConfig,
    /// Rigid part target: all mass on the part's own rows.
    pub hard_part_target: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            parts: 6,
            beta: 0.25,
            gamma: 0.20,
            margin: 0.20,
            lambda1: 1.0,
            lambda2: 1.0,
            p_identities: 6,
            a_images: 8,
            input_height: 96,
            input_width: 32,
            stage_channels: vec![16, 32, 64],
            subnet_width: 512,
            attention_reduction: 16,
            epochs: 30,
            learning_rate: 0.01,
            lr_decay_epochs: vec![12, 24],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            random_erase_prob: 0.5,
            hflip_prob: 0.5,
            extra_stripe_subnets: true,
            channel_attention: true,
            supervision_loss: true,
            part_reg: true,
            holistic_reg: true,
            supervision_variant: SupervisionVariantConfig::Standard,
            attention_variant: AttentionVariantConfig::Standard,
            hard_part_target: false,
        }
    }
}

impl ExperimentConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_height: self.input_height,
            input_width: self.input_width,
            stage_channels: self.stage_channels.clone(),
        }
    }

    pub fn feature_height(&self) -> usize {
        self.backbone_config().feature_height()
    }

    /// Effective target amplitude: the rigid variant pins gamma at K/H.
    pub fn effective_gamma(&self) -> f64 {
        if self.hard_part_target {
            self.parts as f64 / self.feature_height() as f64
        } else {
            self.gamma
        }
    }

    /// Collects every problem into one aggregated report.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let bb = self.backbone_config();
        if let Err(e) = bb.validate() {
            problems.push(e.to_string());
        } else {
            let h = bb.feature_height();
            let w = bb.feature_width();
            if self.parts == 0 || h % self.parts != 0 {
                problems.push(format!(
                    "feature height {h} not divisible into {} parts",
                    self.parts
                ));
            }
            if w == 0 {
                problems.push("feature width is zero".into());
            }
            if h % self.parts == 0 && self.parts > 0 && !self.hard_part_target {
                let (lo, hi) = gamma_band(h, self.parts);
                if !(lo..=hi).contains(&self.gamma) {
                    problems.push(format!(
                        "gamma {} outside the feasible band [{lo}, {hi}] for H={h}, K={}",
                        self.gamma, self.parts
                    ));
                }
            }
            let c = bb.output_channels();
            if self.channel_attention
                && (self.attention_reduction == 0 || c % self.attention_reduction != 0)
            {
                problems.push(format!(
                    "attention reduction {} does not divide {c} channels",
                    self.attention_reduction
                ));
            }
        }
        if !(0.0 < self.beta && self.beta <= 1.0) {
            problems.push(format!("beta {} outside (0, 1]", self.beta));
        }
        if self.margin < 0.0 {
            problems.push(format!("margin {} is negative", self.margin));
        }
        if self.p_identities < 2 {
            problems.push("need P >= 2 identities per batch for the triplet loss".into());
        }
        if self.a_images < 1 {
            problems.push("need A >= 1 images per identity".into());
        }
        if self.subnet_width == 0 {
            problems.push("sub-network width is zero".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            problems.push(format!("learning rate {} not positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.random_erase_prob) {
            problems.push("random_erase_prob outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            problems.push("hflip_prob outside [0, 1]".into());
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            problems.push("loss weights must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    /// Content hash of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The ablation table rows, in presentation order.
pub const ABLATION_ROWS: &[&str] = &[
    "baseline",
    "baseline+",
    "ca",
    "bcca",
    "part-reg",
    "holistic-reg",
    "spatial",
    "full",
];

/// Applies a named ablation row to a base configuration. Every row except
/// the bare baseline keeps the extra stripe sub-networks.
pub fn apply_ablation_row(base: &ExperimentConfig, row: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.extra_stripe_subnets = true;
    cfg.channel_attention = false;
    cfg.supervision_loss = false;
    cfg.part_reg = false;
    cfg.holistic_reg = false;
    match row {
        "baseline" => cfg.extra_stripe_subnets = false,
        "baseline+" => {}
        "ca" => cfg.channel_attention = true,
        "bcca" => {
            cfg.channel_attention = true;
            cfg.supervision_loss = true;
        }
        "part-reg" => cfg.part_reg = true,
        "holistic-reg" => cfg.holistic_reg = true,
        "spatial" => {
            cfg.part_reg = true;
            cfg.holistic_reg = true;
        }
        "full" => {
            cfg.channel_attention = true;
            cfg.supervision_loss = true;
            cfg.part_reg = true;
            cfg.holistic_reg = true;
        }
        other => {
            return Err(Error::config(format!(
                "unknown ablation row '{other}'; expected one of {ABLATION_ROWS:?}"
            )))
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_the_standard_regime() {
        let c = ExperimentConfig::default();
        assert_eq!(c.parts, 6);
        assert_eq!(c.beta, 0.25);
        assert_eq!(c.gamma, 0.20);
        assert_eq!(c.margin, 0.20);
        assert_eq!((c.p_identities, c.a_images), (6, 8));
        assert_eq!((c.lambda1, c.lambda2), (1.0, 1.0));
        assert_eq!(c.subnet_width, 512);
        c.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig {
            seed: 17,
            supervision_variant: SupervisionVariantConfig::OneHot,
            attention_variant: AttentionVariantConfig::Shared,
            ..Default::default()
        };
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "betaa": 0.5}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn validation_aggregates_all_problems() {
        let bad = ExperimentConfig {
            beta: 2.0,
            learning_rate: -1.0,
            p_identities: 1,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("beta"), "{msg}");
        assert!(msg.contains("learning rate"), "{msg}");
        assert!(msg.contains("P >= 2"), "{msg}");
    }

    #[test]
    fn gamma_band_enforced() {
        // Default grid: H = 12, K = 6, band [1/12, 0.5].
        let bad = ExperimentConfig {
            gamma: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let hard = ExperimentConfig {
            gamma: 0.6,
            hard_part_target: true,
            ..Default::default()
        };
        // The rigid variant ignores gamma.
        hard.validate().unwrap();
        assert_eq!(hard.effective_gamma(), 0.5);
    }

    #[test]
    fn ablation_rows_set_the_right_toggles() {
        let base = ExperimentConfig::default();
        let b = apply_ablation_row(&base, "baseline").unwrap();
        assert!(!b.extra_stripe_subnets && !b.channel_attention && !b.part_reg);
        let bp = apply_ablation_row(&base, "baseline+").unwrap();
        assert!(bp.extra_stripe_subnets && !bp.channel_attention);
        let ca = apply_ablation_row(&base, "ca").unwrap();
        assert!(ca.channel_attention && !ca.supervision_loss);
        let bcca = apply_ablation_row(&base, "bcca").unwrap();
        assert!(bcca.channel_attention && bcca.supervision_loss && !bcca.part_reg);
        let full = apply_ablation_row(&base, "full").unwrap();
        assert!(full.channel_attention && full.supervision_loss && full.part_reg && full.holistic_reg);
        assert!(apply_ablation_row(&base, "nope").is_err());
    }
}
