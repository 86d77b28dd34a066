//! Small convolutional feature extractor producing the batch feature tensor
//! consumed by the part machinery.
//!
//! Each stage folds a 2×2 neighborhood into channels and applies a pointwise
//! convolution with BN and ReLU, so a stage is an exact 2×2 stride-2
//! convolution and the downsample factor is 2^stages. The final ReLU keeps
//! every output non-negative, which the supervision grouping relies on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ConvBlock;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of each stage; the last entry is the feature channel
    /// count C. One stage halves each spatial dimension.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_height: 96,
            input_width: 32,
            stage_channels: vec![16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn downsample(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / self.downsample()
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone stage width of zero"));
        }
        let d = self.downsample();
        if self.input_height % d != 0 || self.input_width % d != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by downsample factor {}",
                self.input_height, self.input_width, d
            )));
        }
        Ok(())
    }
}

/// Backbone output: activations shaped N×C×H×W, all entries ≥ 0.
#[derive(Copy, Clone, Debug)]
pub struct FeatureBatch {
    pub var: Var,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    stages: Vec<ConvBlock>,
}

impl ToyBackbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut c_in = 3;
        for (i, &c_out) in config.stage_channels.iter().enumerate() {
            // space_to_depth(2) quadruples the incoming channel count.
            stages.push(ConvBlock::new(&format!("backbone.stage{i}"), c_in * 4, c_out, rng));
            c_in = c_out;
        }
        Ok(ToyBackbone { config, stages })
    }

    pub fn forward(&mut self, tape: &mut Tape, images: Var, train: bool) -> Result<FeatureBatch> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract(format!(
                "backbone expects N x 3 x H x W images, got {shape:?}"
            )));
        }
        if shape[2] != self.config.input_height || shape[3] != self.config.input_width {
            return Err(Error::contract(format!(
                "backbone configured for {}x{} input, got {}x{}",
                self.config.input_height, self.config.input_width, shape[2], shape[3]
            )));
        }
        let mut x = images;
        for stage in &mut self.stages {
            x = tape.space_to_depth(x, 2)?;
            x = stage.forward(tape, x, train)?;
        }
        Ok(FeatureBatch {
            var: x,
            n: shape[0],
            c: self.config.output_channels(),
            h: self.config.feature_height(),
            w: self.config.feature_width(),
        })
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        for stage in &mut self.stages {
            stage.visit_params_mut(f);
        }
    }

    pub fn visit_bns_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::BatchNorm)) {
        for stage in &mut self.stages {
            stage.visit_bns_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn default_config_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.downsample(), 8);
        assert_eq!(cfg.feature_height(), 12);
        assert_eq!(cfg.feature_width(), 4);
        assert_eq!(cfg.output_channels(), 64);
    }

    #[test]
    fn paper_scale_config_shapes() {
        // 384x128 input with four halving stages gives the 24x8 grid of a
        // stride-16 backbone.
        let cfg = BackboneConfig {
            input_height: 384,
            input_width: 128,
            stage_channels: vec![8, 8, 8, 8],
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_height(), 24);
        assert_eq!(cfg.feature_width(), 8);
    }

    #[test]
    fn rejects_non_divisible_input() {
        let cfg = BackboneConfig {
            input_height: 50,
            input_width: 32,
            stage_channels: vec![8, 8],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shape_and_nonnegativity() {
        let cfg = BackboneConfig {
            input_height: 24,
            input_width: 8,
            stage_channels: vec![8, 12],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut bb = ToyBackbone::new(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4 * 3 * 24 * 8).map(|i| (i % 17) as f64 / 17.0).collect();
        let imgs = tape.leaf(Tensor::from_parts(vec![4, 3, 24, 8], data), false);
        let fb = bb.forward(&mut tape, imgs, true).unwrap();
        assert_eq!(tape.value(fb.var).shape(), &[4, 12, 6, 2]);
        assert!(tape.value(fb.var).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_image_broadcasts_bias_path() {
        // With zero input the convolution output is constant, so every image
        // and every spatial position carries the same per-channel value.
        let cfg = BackboneConfig {
            input_height: 16,
            input_width: 8,
            stage_channels: vec![6, 10],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut bb = ToyBackbone::new(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let imgs = tape.leaf(Tensor::zeros(&[3, 3, 16, 8]), false);
        let fb = bb.forward(&mut tape, imgs, false).unwrap();
        let out = tape.value(fb.var);
        let (c, hw) = (fb.c, fb.h * fb.w);
        for n in 0..fb.n {
            for ci in 0..c {
                let base = (n * c + ci) * hw;
                let v0 = out.data()[ci * hw]; // image 0, same channel
                for p in 0..hw {
                    assert_eq!(out.data()[base + p], v0);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn output_shape_is_function_of_config(
            stages in 1usize..4,
            base in 1usize..5,
            hmul in 1usize..4,
            wmul in 1usize..4,
            seed in 0u64..1000,
        ) {
            let d = 1usize << stages;
            let cfg = BackboneConfig {
                input_height: d * hmul,
                input_width: d * wmul,
                stage_channels: (0..stages).map(|i| base + i).collect(),
            };
            prop_assert!(cfg.validate().is_ok());
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut bb = ToyBackbone::new(cfg.clone(), &mut rng).unwrap();
            let mut tape = Tape::new();
            let n = 2;
            let numel = n * 3 * cfg.input_height * cfg.input_width;
            let data: Vec<f64> = (0..numel).map(|i| ((i * 31 + seed as usize) % 101) as f64 / 101.0).collect();
            let imgs = tape.leaf(Tensor::from_parts(vec![n, 3, cfg.input_height, cfg.input_width], data), false);
            let fb = bb.forward(&mut tape, imgs, true).unwrap();
            prop_assert_eq!(
                tape.value(fb.var).shape(),
                &[n, cfg.output_channels(), cfg.feature_height(), cfg.feature_width()]
            );
            prop_assert!(tape.value(fb.var).data().iter().all(|&v| v >= 0.0));
        }
    }
}
