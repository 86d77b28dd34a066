//! The full part-aware model: backbone, K attention modules, K part
//! sub-networks, optional stripe sub-networks, and the training objective.
//!
//! Training-time wiring per part k: attention weights recalibrate the shared
//! backbone features, the sub-network turns them into a part feature and
//! logits, and the post-conv1 maps feed the spatial regularizers. The
//! holistic embedding is the concatenation of the K part features.
//! Evaluation builds only the feature path: no classifiers, no stripe
//! sub-networks, no losses.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::collections::HashMap;

use crate::backbone::{FeatureBatch, ToyBackbone};
use crate::bcca::{
    batch_mean_weights, recalibrate, recalibrate_shared, supervision_loss,
    supervision_loss_per_image, AttentionVariant, BccaModule,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Param};
use crate::objective::{batch_hard_triplet, cross_entropy_part, total_loss, LossTerms};
use crate::spatial::{holistic_profile, holistic_target, kl_loss, part_profile, part_target};
use crate::subnet::{assemble_holistic, stripe_input, PartSubnet, SubnetFeatures};
use crate::supervision::{estimate_supervision, SupervisionMatrix};
use crate::tensor::{Tape, Tensor, Var};

/// Scalar values of each objective term, for logging.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub part_id: f64,
    pub triplet: f64,
    pub attention: f64,
    pub part_reg: f64,
    pub holistic_reg: f64,
    pub stripe_id: f64,
}

pub struct TrainStep {
    pub loss: Var,
    pub values: LossValues,
    pub supervision: Option<SupervisionMatrix>,
}

pub struct AttentionDump {
    /// Per part: N×C per-image weights.
    pub per_image: Vec<Tensor>,
    /// Per part: length-C batch mean.
    pub mean: Vec<Tensor>,
}

pub struct ProfileDump {
    pub part_profiles: Vec<Tensor>,
    pub part_targets: Vec<Tensor>,
    pub holistic: Tensor,
    pub holistic_target: Tensor,
}

#[derive(Clone)]
pub struct BcdModel {
    pub config: ExperimentConfig,
    pub classes: usize,
    backbone: ToyBackbone,
    attention: Vec<BccaModule>,
    subnets: Vec<PartSubnet>,
    stripes: Vec<PartSubnet>,
}

impl BcdModel {
    /// Builds a freshly initialized model; weights are seeded from the
    /// config, so equal configs give bit-identical models.
    pub fn new(config: &ExperimentConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::config("model needs at least one identity class"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let backbone = ToyBackbone::new(config.backbone_config(), &mut rng)?;
        let c = config.backbone_config().output_channels();
        let mut attention = Vec::new();
        if config.channel_attention {
            for k in 0..config.parts {
                attention.push(BccaModule::new(
                    &format!("attention{k}"),
                    c,
                    config.attention_reduction,
                    &mut rng,
                )?);
            }
        }
        let mut subnets = Vec::new();
        for k in 0..config.parts {
            subnets.push(PartSubnet::new(
                &format!("part{k}"),
                c,
                config.subnet_width,
                classes,
                &mut rng,
            ));
        }
        let mut stripes = Vec::new();
        if config.extra_stripe_subnets {
            for k in 0..config.parts {
                stripes.push(PartSubnet::new(
                    &format!("stripe{k}"),
                    c,
                    config.subnet_width,
                    classes,
                    &mut rng,
                ));
            }
        }
        Ok(BcdModel {
            config: config.clone(),
            classes,
            backbone,
            attention,
            subnets,
            stripes,
        })
    }

    pub fn feature_height(&self) -> usize {
        self.backbone.config.feature_height()
    }

    /// Per-part input after optional attention recalibration. Returns the
    /// input var and, when attention ran, the (per-image, batch-mean) weights.
    fn part_input(
        &mut self,
        tape: &mut Tape,
        fb: &FeatureBatch,
        k: usize,
        train: bool,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        if !self.config.channel_attention {
            return Ok((fb.var, None));
        }
        let weights = self.attention[k].forward(tape, fb.var, train)?;
        let mean = batch_mean_weights(tape, weights)?;
        let recalibrated = match AttentionVariant::from(self.config.attention_variant) {
            AttentionVariant::Shared => recalibrate_shared(tape, mean, fb.var)?,
            _ => recalibrate(tape, weights, fb.var)?,
        };
        Ok((recalibrated, Some((weights, mean))))
    }

    /// Full training-step graph: every enabled loss term on one tape.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        images: Var,
        labels: &[usize],
    ) -> Result<TrainStep> {
        let fb = self.backbone.forward(tape, images, true)?;
        let supervision = if self.config.channel_attention && self.config.supervision_loss {
            Some(estimate_supervision(
                tape.value(fb.var),
                self.config.parts,
                self.config.beta,
                self.config.supervision_variant.into(),
            )?)
        } else {
            None
        };

        let h = self.feature_height();
        let gamma = self.config.effective_gamma();
        let mut terms = LossTerms::default();
        let mut features = Vec::with_capacity(self.config.parts);
        let mut conv1_maps = Vec::with_capacity(self.config.parts);
        for k in 0..self.config.parts {
            let (input, weights) = self.part_input(tape, &fb, k, true)?;
            if let (Some(sup), Some((per_image, mean))) = (&supervision, weights) {
                let target = sup.column(k);
                let loss = match AttentionVariant::from(self.config.attention_variant) {
                    AttentionVariant::PerImage => {
                        supervision_loss_per_image(tape, per_image, &target)?
                    }
                    _ => supervision_loss(tape, mean, &target)?,
                };
                if let Some(l) = loss {
                    terms.attention.push(l);
                }
            }
            let out = self.subnets[k].forward(tape, input, true)?;
            let logits = self.subnets[k].logits(tape, out.feature)?;
            terms.part_id.push(cross_entropy_part(tape, logits, labels)?);
            if self.config.part_reg {
                let profile = part_profile(tape, out.conv1_maps)?;
                let target = part_target(k, self.config.parts, h, gamma)?;
                terms.part_reg.push(kl_loss(tape, &target, profile)?);
            }
            features.push(out.feature);
            conv1_maps.push(out.conv1_maps);
        }

        let holistic = assemble_holistic(tape, &features)?;
        terms.triplet = Some(batch_hard_triplet(
            tape,
            holistic,
            labels,
            self.config.margin,
        )?);
        if self.config.holistic_reg {
            let profile = holistic_profile(tape, &conv1_maps)?;
            terms.holistic_reg = Some(kl_loss(tape, &holistic_target(h), profile)?);
        }
        if self.config.extra_stripe_subnets {
            for k in 0..self.config.parts {
                let input = stripe_input(tape, fb.var, k, self.config.parts)?;
                let out = self.stripes[k].forward(tape, input, true)?;
                let logits = self.stripes[k].logits(tape, out.feature)?;
                terms.stripe_id.push(cross_entropy_part(tape, logits, labels)?);
            }
        }

        let loss = total_loss(tape, &terms, self.config.lambda1, self.config.lambda2)?;
        let values = loss_values(tape, &terms, loss)?;
        Ok(TrainStep {
            loss,
            values,
            supervision,
        })
    }

    /// Evaluation-time feature path for each part.
    fn eval_parts(&mut self, tape: &mut Tape, images: Var) -> Result<Vec<SubnetFeatures>> {
        let fb = self.backbone.forward(tape, images, false)?;
        let mut outs = Vec::with_capacity(self.config.parts);
        for k in 0..self.config.parts {
            let (input, _) = self.part_input(tape, &fb, k, false)?;
            outs.push(self.subnets[k].forward(tape, input, false)?);
        }
        Ok(outs)
    }

    /// Holistic embeddings for retrieval: N×(K·width). The graph contains no
    /// classifier, no stripe sub-networks, and no loss terms.
    pub fn embed(&mut self, tape: &mut Tape, images: Var) -> Result<Var> {
        let outs = self.eval_parts(tape, images)?;
        let features: Vec<Var> = outs.iter().map(|o| o.feature).collect();
        assemble_holistic(tape, &features)
    }

    /// Eval-mode backbone features as plain data.
    pub fn backbone_features(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let iv = tape.leaf(images.clone(), false);
        let fb = self.backbone.forward(&mut tape, iv, false)?;
        Ok(tape.value(fb.var).clone())
    }

    /// Eval-mode attention weights and their batch means for every part.
    pub fn attention_weights(&mut self, images: &Tensor) -> Result<AttentionDump> {
        if !self.config.channel_attention {
            return Err(Error::config(
                "attention dump requested but channel attention is disabled",
            ));
        }
        let mut tape = Tape::new();
        let iv = tape.leaf(images.clone(), false);
        let fb = self.backbone.forward(&mut tape, iv, false)?;
        let mut per_image = Vec::new();
        let mut mean = Vec::new();
        for k in 0..self.config.parts {
            let w = self.attention[k].forward(&mut tape, fb.var, false)?;
            let m = batch_mean_weights(&mut tape, w)?;
            per_image.push(tape.value(w).clone());
            mean.push(tape.value(m).clone());
        }
        Ok(AttentionDump { per_image, mean })
    }

    /// Eval-mode height profiles of every part plus the holistic profile.
    pub fn height_profiles(&mut self, images: &Tensor) -> Result<ProfileDump> {
        let h = self.feature_height();
        let gamma = self.config.effective_gamma();
        let mut tape = Tape::new();
        let iv = tape.leaf(images.clone(), false);
        let outs = self.eval_parts(&mut tape, iv)?;
        let mut part_profiles = Vec::new();
        let mut part_targets = Vec::new();
        for (k, out) in outs.iter().enumerate() {
            let p = part_profile(&mut tape, out.conv1_maps)?;
            part_profiles.push(tape.value(p).clone());
            part_targets.push(part_target(k, self.config.parts, h, gamma)?);
        }
        let maps: Vec<Var> = outs.iter().map(|o| o.conv1_maps).collect();
        let hp = holistic_profile(&mut tape, &maps)?;
        Ok(ProfileDump {
            part_profiles,
            part_targets,
            holistic: tape.value(hp).clone(),
            holistic_target: holistic_target(h),
        })
    }

    /// Supervision matrix estimated from eval-mode backbone features.
    pub fn supervision_for(&mut self, images: &Tensor) -> Result<SupervisionMatrix> {
        let features = self.backbone_features(images)?;
        estimate_supervision(
            &features,
            self.config.parts,
            self.config.beta,
            self.config.supervision_variant.into(),
        )
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        for a in &mut self.attention {
            a.visit_params_mut(f);
        }
        for s in &mut self.subnets {
            s.visit_params_mut(f);
        }
        for s in &mut self.stripes {
            s.visit_params_mut(f);
        }
    }

    pub fn visit_bns_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.backbone.visit_bns_mut(f);
        for a in &mut self.attention {
            a.visit_bns_mut(f);
        }
        for s in &mut self.subnets {
            s.visit_bns_mut(f);
        }
        for s in &mut self.stripes {
            s.visit_bns_mut(f);
        }
    }

    /// Every persistent tensor (parameters and BN running statistics) by
    /// name, in a fixed structural order.
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |p| out.push((p.name.clone(), p.value.clone())));
        self.visit_bns_mut(&mut |bn| {
            out.push((
                format!("{}.running_mean", bn.name),
                Tensor::from_parts(vec![bn.running_mean.len()], bn.running_mean.clone()),
            ));
            out.push((
                format!("{}.running_var", bn.name),
                Tensor::from_parts(vec![bn.running_var.len()], bn.running_var.clone()),
            ));
        });
        out
    }

    /// Overwrites parameters and running statistics from a name → tensor
    /// map. Every model tensor must be present and shapes must match.
    pub fn load_tensors(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |p| match tensors.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(t) => missing.push(format!(
                "{}: shape {:?} vs {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )),
            None => missing.push(format!("{} absent", p.name)),
        });
        self.visit_bns_mut(&mut |bn| {
            for (suffix, slot) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{}.{suffix}", bn.name);
                match tensors.get(&name) {
                    Some(t) if t.numel() == slot.len() => *slot = t.data().to_vec(),
                    Some(_) => missing.push(format!("{name}: wrong length")),
                    None => missing.push(format!("{name} absent")),
                }
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "checkpoint incomplete: {}",
                missing.join(", ")
            )))
        }
    }

    /// Copies part sub-network 0's weights into every other part
    /// sub-network. Test hook for the feature-collapse baseline.
    pub fn tie_subnet_weights(&mut self) {
        let reference = self.subnets[0].clone();
        for k in 1..self.subnets.len() {
            let mut donor_values = Vec::new();
            let mut r = reference.clone();
            r.visit_params_mut(&mut |p| donor_values.push(p.value.clone()));
            let mut i = 0;
            self.subnets[k].visit_params_mut(&mut |p| {
                p.value = donor_values[i].clone();
                i += 1;
            });
        }
    }
}

fn loss_values(tape: &Tape, terms: &LossTerms, loss: Var) -> Result<LossValues> {
    let sum = |vars: &[Var]| -> Result<f64> {
        let mut acc = 0.0;
        for &v in vars {
            acc += tape.value(v).item()?;
        }
        Ok(acc)
    };
    Ok(LossValues {
        total: tape.value(loss).item()?,
        part_id: sum(&terms.part_id)?,
        triplet: terms
            .triplet
            .map(|v| tape.value(v).item())
            .transpose()?
            .unwrap_or(0.0),
        attention: sum(&terms.attention)?,
        part_reg: sum(&terms.part_reg)?,
        holistic_reg: terms
            .holistic_reg
            .map(|v| tape.value(v).item())
            .transpose()?
            .unwrap_or(0.0),
        stripe_id: sum(&terms.stripe_id)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttentionVariantConfig;

    pub(crate) fn micro_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 1,
            parts: 3,
            input_height: 24,
            input_width: 8,
            stage_channels: vec![6, 8],
            subnet_width: 8,
            attention_reduction: 4,
            p_identities: 2,
            a_images: 2,
            epochs: 2,
            lr_decay_epochs: vec![1],
            ..Default::default()
        }
    }

    fn micro_batch(n: usize) -> (Tensor, Vec<usize>) {
        let numel = n * 3 * 24 * 8;
        let data: Vec<f64> = (0..numel).map(|i| ((i * 37) % 251) as f64 / 251.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / 2).collect();
        (Tensor::from_parts(vec![n, 3, 24, 8], data), labels)
    }

    #[test]
    fn train_step_produces_finite_loss_and_all_terms() {
        let cfg = micro_config();
        let mut model = BcdModel::new(&cfg, 2).unwrap();
        let (images, labels) = micro_batch(4);
        let mut tape = Tape::new();
        let iv = tape.leaf(images, false);
        let step = model.forward_train(&mut tape, iv, &labels).unwrap();
        assert!(step.values.total.is_finite());
        assert!(step.values.part_id > 0.0);
        assert!(step.values.stripe_id > 0.0);
        assert!(step.values.part_reg >= 0.0);
        assert!(step.values.holistic_reg >= 0.0);
        assert!(step.supervision.is_some());
        // Total is the weighted sum of its parts.
        let v = step.values;
        let recomposed = v.part_id + v.triplet + v.attention + v.part_reg + v.holistic_reg + v.stripe_id;
        assert!((v.total - recomposed).abs() < 1e-9);
    }

    #[test]
    fn toggles_remove_terms_exactly() {
        let cfg = ExperimentConfig {
            channel_attention: false,
            supervision_loss: false,
            part_reg: false,
            holistic_reg: false,
            extra_stripe_subnets: false,
            ..micro_config()
        };
        let mut model = BcdModel::new(&cfg, 2).unwrap();
        let (images, labels) = micro_batch(4);
        let mut tape = Tape::new();
        let iv = tape.leaf(images, false);
        let step = model.forward_train(&mut tape, iv, &labels).unwrap();
        assert_eq!(step.values.attention, 0.0);
        assert_eq!(step.values.part_reg, 0.0);
        assert_eq!(step.values.holistic_reg, 0.0);
        assert_eq!(step.values.stripe_id, 0.0);
        assert!(step.supervision.is_none());
        assert!((step.values.total - step.values.part_id - step.values.triplet).abs() < 1e-12);
    }

    #[test]
    fn collapsed_baseline_has_identical_part_features() {
        // No attention and tied weights: every sub-network sees the same
        // input with the same parameters, so the K part features coincide.
        let cfg = ExperimentConfig {
            channel_attention: false,
            supervision_loss: false,
            ..micro_config()
        };
        let mut model = BcdModel::new(&cfg, 2).unwrap();
        model.tie_subnet_weights();
        let (images, _) = micro_batch(4);
        let mut tape = Tape::new();
        let iv = tape.leaf(images, false);
        let h = model.embed(&mut tape, iv).unwrap();
        let d = tape.value(h).data();
        let width = cfg.subnet_width;
        for n in 0..4 {
            let row = &d[n * 3 * width..(n + 1) * 3 * width];
            assert_eq!(&row[..width], &row[width..2 * width]);
            assert_eq!(&row[..width], &row[2 * width..]);
        }
    }

    #[test]
    fn embeddings_do_not_depend_on_eval_batching() {
        let cfg = micro_config();
        let mut model = BcdModel::new(&cfg, 2).unwrap();
        let (images, _) = micro_batch(4);
        let mut tape = Tape::new();
        let iv = tape.leaf(images.clone(), false);
        let all_var = model.embed(&mut tape, iv).unwrap();
        let all = tape.value(all_var).clone();

        let mut singles = Vec::new();
        for n in 0..4 {
            let one = Tensor::from_parts(
                vec![1, 3, 24, 8],
                images.data()[n * 3 * 24 * 8..(n + 1) * 3 * 24 * 8].to_vec(),
            );
            let mut tape = Tape::new();
            let iv = tape.leaf(one, false);
            let e = model.embed(&mut tape, iv).unwrap();
            singles.extend_from_slice(tape.value(e).data());
        }
        assert_eq!(all.data(), &singles[..]);
    }

    #[test]
    fn identical_seeds_build_identical_models() {
        let cfg = micro_config();
        let mut a = BcdModel::new(&cfg, 3).unwrap();
        let mut b = BcdModel::new(&cfg, 3).unwrap();
        let at = a.named_tensors();
        let bt = b.named_tensors();
        assert_eq!(at.len(), bt.len());
        for ((na, ta), (nb, tb)) in at.iter().zip(&bt) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} differs");
        }
    }

    #[test]
    fn named_tensors_round_trip_through_load() {
        let cfg = micro_config();
        let mut a = BcdModel::new(&cfg, 3).unwrap();
        let snapshot: HashMap<String, Tensor> = a.named_tensors().into_iter().collect();
        let other_cfg = ExperimentConfig { seed: 99, ..cfg };
        let mut b = BcdModel::new(&other_cfg, 3).unwrap();
        b.load_tensors(&snapshot).unwrap();
        assert_eq!(
            a.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t))
                .collect::<Vec<_>>(),
            b.named_tensors().into_iter().collect::<Vec<_>>()
        );

        let mut incomplete = snapshot.clone();
        incomplete.remove("part0.conv1.conv.weight");
        let mut c = BcdModel::new(&other_cfg, 3).unwrap();
        assert!(c.load_tensors(&incomplete).is_err());
    }

    #[test]
    fn shared_variant_uses_one_weight_vector_per_batch() {
        let cfg = ExperimentConfig {
            attention_variant: AttentionVariantConfig::Shared,
            ..micro_config()
        };
        let mut model = BcdModel::new(&cfg, 2).unwrap();
        let (images, labels) = micro_batch(4);
        let mut tape = Tape::new();
        let iv = tape.leaf(images, false);
        let step = model.forward_train(&mut tape, iv, &labels).unwrap();
        assert!(step.values.total.is_finite());
    }
}
