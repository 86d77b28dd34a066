//! Parameter handles and the small layer vocabulary used by the model:
//! pointwise convolutions with batch norm, and a bias-free linear classifier.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable tensor. The id survives clones so gradients looked up
/// after a backward pass match the parameter they came from.
#[derive(Clone, Debug)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers this parameter as a gradient-tracked leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.bind_param(self.id, &self.value)
    }
}

/// Uniform init over ±1/√fan_in.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Zero-mean Gaussian init.
pub fn gaussian(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// 1×1 convolution layer (no bias; a batch-norm layer always follows).
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: Param,
}

impl Conv1x1 {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Conv1x1 {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_fan_in(&[c_out, c_in], c_in, rng),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        tape.conv1x1(x, w, None)
    }
}

/// Batch normalization with running statistics (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        if train {
            let shape = tape.value(x).shape().to_vec();
            let (out, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = (shape[0] * shape[2] * shape[3]) as f64;
            // Running variance keeps the unbiased estimate.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..self.running_mean.len() {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                    + self.momentum * stats.var[c] * unbias;
            }
            Ok(out)
        } else {
            tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)
        }
    }
}

/// Conv1x1 → BN → ReLU, the building block of the backbone and sub-networks.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv1x1,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv1x1::new(&format!("{name}.conv"), c_in, c_out, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let x = self.conv.forward(tape, x)?;
        let x = self.bn.forward(tape, x, train)?;
        Ok(tape.relu(x))
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv.weight);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    pub fn visit_bns_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.bn);
    }
}

/// Bias-free linear classifier: logits = x · W with W of shape [d, classes].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), gaussian(&[d_in, d_out], sigma, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        tape.matmul(x, w)
    }
}
