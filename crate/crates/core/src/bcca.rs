//! Batch coherence-guided channel attention.
//!
//! A squeeze-style module (GMP, then two pointwise convolutions with BN and a
//! sigmoid squash) predicts per-image channel weights in [0, 1]. Features are
//! recalibrated by channel-wise multiplication, and the batch mean of the
//! weights is pulled towards the supervision column for the part by a cosine
//! distance loss. The supervision target is a plain tensor, so no gradient
//! ever reaches it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1x1};
use crate::tensor::{Tape, Tensor, Var};

/// How attention weights and their supervision are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Per-image weights recalibrate features; the loss acts on the batch
    /// mean of the weights.
    #[default]
    Standard,
    /// The loss acts on every per-image weight vector individually.
    PerImage,
    /// The batch-mean weights recalibrate every image's features.
    Shared,
}

#[derive(Clone, Debug)]
pub struct BccaModule {
    reduce_conv: Conv1x1,
    reduce_bn: BatchNorm,
    expand_conv: Conv1x1,
    expand_bn: BatchNorm,
    channels: usize,
}

impl BccaModule {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "attention reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(BccaModule {
            reduce_conv: Conv1x1::new(&format!("{name}.reduce"), channels, hidden, rng),
            reduce_bn: BatchNorm::new(&format!("{name}.reduce_bn"), hidden),
            expand_conv: Conv1x1::new(&format!("{name}.expand"), hidden, channels, rng),
            expand_bn: BatchNorm::new(&format!("{name}.expand_bn"), channels),
            channels,
        })
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        f(&mut self.reduce_conv.weight);
        f(&mut self.reduce_bn.gamma);
        f(&mut self.reduce_bn.beta);
        f(&mut self.expand_conv.weight);
        f(&mut self.expand_bn.gamma);
        f(&mut self.expand_bn.beta);
    }

    pub fn visit_bns_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.reduce_bn);
        f(&mut self.expand_bn);
    }

    /// Predicts channel weights for a batch: N×C×H×W → N×C, entries in [0, 1].
    pub fn forward(&mut self, tape: &mut Tape, features: Var, train: bool) -> Result<Var> {
        let n = tape.value(features).shape()[0];
        let pooled = tape.global_max_pool(features)?;
        let x = tape.reshape(pooled, vec![n, self.channels, 1, 1])?;
        let x = self.reduce_conv.forward(tape, x)?;
        let x = self.reduce_bn.forward(tape, x, train)?;
        let x = tape.relu(x);
        let x = self.expand_conv.forward(tape, x)?;
        let x = self.expand_bn.forward(tape, x, train)?;
        let x = tape.sigmoid(x);
        tape.reshape(x, vec![n, self.channels])
    }
}

/// Channel-wise recalibration with per-image weights (N×C against N×C×H×W).
pub fn recalibrate(tape: &mut Tape, weights: Var, features: Var) -> Result<Var> {
    tape.scale_channels(features, weights)
}

/// Recalibration with one shared weight vector: the length-C mean weights are
/// broadcast to every image in the batch.
pub fn recalibrate_shared(tape: &mut Tape, mean_weights: Var, features: Var) -> Result<Var> {
    let n = tape.value(features).shape()[0];
    let row = tape.reshape(mean_weights, vec![1, tape.value(mean_weights).numel()])?;
    let rows = vec![row; n];
    let stacked = tape.concat(0, &rows)?;
    tape.scale_channels(features, stacked)
}

/// Batch mean of per-image weights: N×C → C.
pub fn batch_mean_weights(tape: &mut Tape, weights: Var) -> Result<Var> {
    tape.mean_axis(weights, 0)
}

/// Cosine-distance supervision on the batch-mean weights. Returns `None`
/// when the target column was fully filtered; the part contributes no loss
/// (and no gradient) for this batch.
pub fn supervision_loss(tape: &mut Tape, mean_weights: Var, target: &Tensor) -> Result<Option<Var>> {
    if target.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    Ok(Some(tape.cosine_distance_to(mean_weights, target)?))
}

/// Per-image supervision: the mean over images of the cosine distance of
/// every individual weight vector to the target.
pub fn supervision_loss_per_image(
    tape: &mut Tape,
    weights: Var,
    target: &Tensor,
) -> Result<Option<Var>> {
    if target.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let shape = tape.value(weights).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let mut total: Option<Var> = None;
    for i in 0..n {
        let row = tape.narrow(weights, 0, i, 1)?;
        let row = tape.reshape(row, vec![c])?;
        let d = tape.cosine_distance_to(row, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    Ok(Some(tape.mul_scalar(total.expect("n >= 1"), 1.0 / n as f64)))
}

/// Mean pairwise cosine similarity among a set of weight vectors. Used to
/// quantify how diverse the K per-part attention profiles are.
pub fn mean_pairwise_cosine(vectors: &[Tensor]) -> f64 {
    if vectors.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let (a, b) = (vectors[i].data(), vectors[j].data());
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            total += dot / (na.sqrt() * nb.sqrt() + crate::tensor::NORM_EPS);
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn module(c: usize, r: usize) -> BccaModule {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        BccaModule::new("bcca", c, r, &mut rng).unwrap()
    }

    #[test]
    fn rejects_indivisible_reduction() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(BccaModule::new("bcca", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn weights_stay_in_unit_interval() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut m = module(8, 4);
        for _ in 0..20 {
            let n = 3;
            let data: Vec<f64> = (0..n * 8 * 4 * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_parts(vec![n, 8, 4, 2], data), false);
            let w = m.forward(&mut tape, x, true).unwrap();
            assert!(tape
                .value(w)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_input_gives_open_interval_weights() {
        let mut m = module(8, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 8, 3, 3]), false);
        let w = m.forward(&mut tape, x, true).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| 0.0 < v && v < 1.0));
    }

    #[test]
    fn identical_images_get_identical_weights() {
        let mut m = module(8, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let one: Vec<f64> = (0..8 * 2 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_parts(vec![2, 8, 2, 2], data), false);
        let w = m.forward(&mut tape, x, true).unwrap();
        let d = tape.value(w).data();
        assert_eq!(&d[..8], &d[8..]);
    }

    #[test]
    fn recalibrate_identity_annihilation_selector() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::full(&[1, 3, 2, 2], 2.0), false);
        let ones = tape.leaf(Tensor::full(&[1, 3], 1.0), false);
        let out = recalibrate(&mut tape, ones, t).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(t).data());

        let zeros = tape.leaf(Tensor::zeros(&[1, 3]), false);
        let out = recalibrate(&mut tape, zeros, t).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let e1 = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap(), false);
        let out = recalibrate(&mut tape, e1, t).unwrap();
        let d = tape.value(out).data();
        assert!(d[..4].iter().all(|&v| v == 0.0));
        assert!(d[4..8].iter().all(|&v| v == 2.0));
        assert!(d[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_zero_for_positively_scaled_target() {
        let target = Tensor::new(vec![4], vec![0.5, 1.0, 0.0, 0.25]).unwrap();
        let scaled = Tensor::from_parts(vec![4], target.data().iter().map(|v| v * 3.0).collect());
        let mut tape = Tape::new();
        let x = tape.leaf(scaled, false);
        let loss = supervision_loss(&mut tape, x, &target).unwrap().unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn loss_one_for_orthogonal_vectors() {
        let target = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap(), false);
        let loss = supervision_loss(&mut tape, x, &target).unwrap().unwrap();
        assert!((tape.value(loss).item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fully_filtered_column_skips_loss() {
        let target = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], 0.3), true);
        assert!(supervision_loss(&mut tape, x, &target).unwrap().is_none());
        assert!(supervision_loss_per_image(&mut tape, x, &target)
            .unwrap()
            .is_none());
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        for _ in 0..5 {
            let target = {
                let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::from_parts(vec![6], data)
            };
            let x = {
                let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
                Tensor::from_parts(vec![6], data)
            };
            let tc = target.clone();
            let err = grad_check(
                move |t, v| Ok(supervision_loss(t, v, &tc.clone())?.expect("nonzero target")),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "cosine loss rel err {err}");
        }
    }

    #[test]
    fn mean_flows_one_over_n_of_per_image_change() {
        // The batch mean is linear: its gradient spreads 1/N to each image.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[4, 3], 0.5), true);
        let mean = batch_mean_weights(&mut tape, w).unwrap();
        let s = tape.sum_all(mean);
        let grads = tape.backward(s).unwrap();
        assert!(grads
            .by_var(w)
            .unwrap()
            .data()
            .iter()
            .all(|&g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pairwise_cosine_bounds() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(mean_pairwise_cosine(&[a.clone(), b]).abs() < 1e-9);
        assert!((mean_pairwise_cosine(&[a.clone(), a]) - 1.0).abs() < 1e-9);
    }
}
