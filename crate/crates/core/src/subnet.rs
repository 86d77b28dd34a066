//! Part sub-networks: conv → GMP → conv → classifier, plus the holistic
//! concatenation and the fixed-stripe auxiliary sub-networks used during
//! training only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Linear};
use crate::tensor::{Tape, Var};

/// One part sub-network. Both convolution widths are equal (`width`); the
/// classifier is bias-free.
#[derive(Clone, Debug)]
pub struct PartSubnet {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub classifier: Linear,
    width: usize,
}

/// Feature-path output of a sub-network.
#[derive(Copy, Clone, Debug)]
pub struct SubnetFeatures {
    /// Part feature f: N×width, output of the second conv block.
    pub feature: Var,
    /// Post-conv1 maps F: N×width×H×W, consumed by the spatial regularizers.
    pub conv1_maps: Var,
}

impl PartSubnet {
    pub fn new(
        name: &str,
        c_in: usize,
        width: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PartSubnet {
            conv1: ConvBlock::new(&format!("{name}.conv1"), c_in, width, rng),
            conv2: ConvBlock::new(&format!("{name}.conv2"), width, width, rng),
            classifier: Linear::new(&format!("{name}.classifier"), width, classes, 0.01, rng),
            width,
        }
    }

    /// Feature path only; the classifier is not touched, so this is the
    /// whole evaluation-time graph.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<SubnetFeatures> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::contract(format!(
                "sub-network expects rank 4 input, got {shape:?}"
            )));
        }
        let n = shape[0];
        let maps = self.conv1.forward(tape, x, train)?;
        let pooled = tape.global_max_pool(maps)?;
        let pooled = tape.reshape(pooled, vec![n, self.width, 1, 1])?;
        let f = self.conv2.forward(tape, pooled, train)?;
        let feature = tape.reshape(f, vec![n, self.width])?;
        Ok(SubnetFeatures {
            feature,
            conv1_maps: maps,
        })
    }

    pub fn logits(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        self.classifier.forward(tape, feature)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.conv1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        f(&mut self.classifier.weight);
    }

    pub fn visit_bns_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::BatchNorm)) {
        self.conv1.visit_bns_mut(f);
        self.conv2.visit_bns_mut(f);
    }
}

/// Concatenates the K part features in part order: K × (N×d) → N×(K·d).
pub fn assemble_holistic(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::contract("holistic assembly of zero parts"));
    }
    tape.concat(1, features)
}

/// Rows of the k-th of `parts` uniform horizontal stripes of an N×C×H×W map.
pub fn stripe_input(tape: &mut Tape, features: Var, k: usize, parts: usize) -> Result<Var> {
    let h = tape.value(features).shape()[2];
    if h % parts != 0 {
        return Err(Error::config(format!(
            "feature height {h} not divisible into {parts} stripes"
        )));
    }
    let rows = h / parts;
    tape.narrow(features, 2, k * rows, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_maps(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn gmp_matches_brute_force_over_conv1_maps() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut net = PartSubnet::new("part0", 6, 8, 4, &mut rng);
        let x = rand_maps(&[3, 6, 4, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let out = net.forward(&mut tape, xv, true).unwrap();
        let maps = tape.value(out.conv1_maps).clone();
        let pooled = {
            let mut t2 = Tape::new();
            let m = t2.leaf(maps.clone(), false);
            let p = t2.global_max_pool(m).unwrap();
            t2.value(p).clone()
        };
        let (n, c, hw) = (3, 8, 8);
        for i in 0..n {
            for ch in 0..c {
                let slice = &maps.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(pooled.data()[i * c + ch], max);
            }
        }
    }

    #[test]
    fn zero_input_gives_identical_features_across_images() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let mut net = PartSubnet::new("part0", 4, 6, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 4, 4, 2]), false);
        let out = net.forward(&mut tape, x, true).unwrap();
        let f = tape.value(out.feature).data();
        assert_eq!(&f[..6], &f[6..12]);
        assert_eq!(&f[..6], &f[12..]);
    }

    #[test]
    fn single_class_cross_entropy_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let mut net = PartSubnet::new("part0", 4, 6, 1, &mut rng);
        let x = rand_maps(&[2, 4, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let out = net.forward(&mut tape, xv, true).unwrap();
        let logits = net.logits(&mut tape, out.feature).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 0]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn holistic_concatenation_order_and_round_trip() {
        let mut tape = Tape::new();
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let mut e2 = vec![0.0; 8];
        e2[4] = 1.0;
        let f1 = tape.leaf(Tensor::from_parts(vec![2, 4], e1[..8].to_vec()), false);
        let f2 = tape.leaf(Tensor::from_parts(vec![2, 4], e2[..8].to_vec()), false);
        let h = assemble_holistic(&mut tape, &[f1, f2]).unwrap();
        assert_eq!(tape.value(h).shape(), &[2, 8]);
        // Image 0: [1,0,0,0, 0,0,0,0] then part 2's slot.
        assert_eq!(tape.value(h).data()[0], 1.0);
        assert_eq!(tape.value(h).data()[8 + 4], 1.0);

        // Slicing back recovers the parts exactly.
        let back1 = tape.narrow(h, 1, 0, 4).unwrap();
        let back2 = tape.narrow(h, 1, 4, 4).unwrap();
        assert_eq!(tape.value(back1).data(), tape.value(f1).data());
        assert_eq!(tape.value(back2).data(), tape.value(f2).data());

        // Pythagorean identity of concatenation.
        let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(
            (norm2(tape.value(h).data())
                - norm2(tape.value(f1).data())
                - norm2(tape.value(f2).data()))
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn stripes_tile_the_feature_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let t = rand_maps(&[2, 3, 12, 4], &mut rng);
        let mut tape = Tape::new();
        let tv = tape.leaf(t.clone(), false);
        let stripes: Vec<Var> = (0..6)
            .map(|k| stripe_input(&mut tape, tv, k, 6).unwrap())
            .collect();
        for (k, &s) in stripes.iter().enumerate() {
            assert_eq!(tape.value(s).shape(), &[2, 3, 2, 4]);
            // Stripe k holds rows 2k..2k+2.
            for n in 0..2 {
                for c in 0..3 {
                    for r in 0..2 {
                        for w in 0..4 {
                            let got = tape.value(s).data()[((n * 3 + c) * 2 + r) * 4 + w];
                            let want = t.data()[((n * 3 + c) * 12 + 2 * k + r) * 4 + w];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
        let rebuilt = tape.concat(2, &stripes).unwrap();
        assert_eq!(tape.value(rebuilt).data(), t.data());

        // K = 1 degenerates to the full map.
        let whole = stripe_input(&mut tape, tv, 0, 1).unwrap();
        assert_eq!(tape.value(whole).data(), t.data());
    }
}
