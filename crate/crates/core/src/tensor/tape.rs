//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so the list is already a topological
//! order and the backward pass is a single reverse sweep that visits each node
//! exactly once. [`Tape::backward`] consumes the tape.

use std::collections::HashMap;

use super::{axis_blocks, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel batch statistics produced by training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divided by the element count).
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    ScaleChannels {
        x: Var,
        w: Var,
    },
    SpaceToDepth {
        x: Var,
        block: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        pred: Var,
        target: Tensor,
    },
    CosineToTarget {
        x: Var,
        target: Tensor,
    },
    L1Normalize(Var),
    L2NormalizeRows(Var),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], addressable by node or by the
/// parameter id the node was bound under.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_bindings: HashMap<u64, Var>,
}

impl Gradients {
    pub fn by_var(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_param_id(&self, id: u64) -> Option<&Tensor> {
        self.param_bindings.get(&id).and_then(|v| self.by_var(*v))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: HashMap<u64, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers (or returns the cached) leaf for an external parameter id.
    pub fn bind_param(&mut self, id: u64, value: &Tensor) -> Var {
        if let Some(&v) = self.param_bindings.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.param_bindings.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::contract("div by zero element".to_string()));
        }
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(out, ng, op)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("log of non-positive value"));
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    // ---- structure ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, ng, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::contract(format!(
                "transpose expects rank 2, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), ng, Op::Transpose(x)))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let len = s[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            ng,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::contract(format!(
                "narrow [{start}, {start}+{len}) on axis {axis} of {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_blocks(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * axis_len + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            ng,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    /// Rearranges `block`×`block` spatial neighborhoods into channels:
    /// N×C×H×W → N×(C·block²)×(H/block)×(W/block).
    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::contract(format!(
                "space_to_depth expects rank 4, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::contract(format!(
                "space_to_depth block {block} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / block, w / block);
        let oc = c * block * block;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * oc * oh * ow];
        for in_ in 0..n {
            for ic in 0..c {
                for dy in 0..block {
                    for dx in 0..block {
                        let out_c = ic * block * block + dy * block + dx;
                        for y in 0..oh {
                            for xcol in 0..ow {
                                let src_idx =
                                    ((in_ * c + ic) * h + (y * block + dy)) * w + (xcol * block + dx);
                                let dst_idx = ((in_ * oc + out_c) * oh + y) * ow + xcol;
                                data[dst_idx] = src[src_idx];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, oc, oh, ow], data),
            ng,
            Op::SpaceToDepth { x, block },
        ))
    }

    /// Picks elements of `x` at the given flat indices, in order.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} elements",
                t.numel()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], data),
            ng,
            Op::Gather { x, indices },
        ))
    }

    // ---- linear / conv ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = da[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), ng, Op::Matmul(a, b)))
    }

    /// Pointwise convolution over N×C×H×W with weight Co×Ci and optional bias.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        if let Some(bias) = b {
            let sb = self.value(bias).shape();
            if sb != [co] {
                return Err(Error::ShapeMismatch {
                    op: "conv1x1 bias",
                    lhs: vec![co],
                    rhs: sb.to_vec(),
                });
            }
        }
        let hw = h * wd;
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![0.0; n * co * hw];
        for ni in 0..n {
            for o in 0..co {
                let orow = &mut data[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                for i in 0..ci {
                    let wv = dw[o * ci + i];
                    if wv == 0.0 {
                        continue;
                    }
                    let xrow = &dx[(ni * ci + i) * hw..(ni * ci + i + 1) * hw];
                    for p in 0..hw {
                        orow[p] += wv * xrow[p];
                    }
                }
            }
        }
        if let Some(bias) = b {
            let dbias = self.value(bias).data().to_vec();
            for ni in 0..n {
                for o in 0..co {
                    let bv = dbias[o];
                    for p in 0..hw {
                        data[(ni * co + o) * hw + p] += bv;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(
            Tensor::from_parts(vec![n, co, h, wd], data),
            ng,
            Op::Conv1x1 { x, w, b },
        ))
    }

    /// Training-mode batch norm over N×C×H×W with per-batch statistics.
    /// Returns the output and the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::contract(format!(
                "batch norm expects rank 4, got {sx:?}"
            )));
        }
        if sx[0] < 2 {
            return Err(Error::contract(format!(
                "training-mode batch norm requires batch size >= 2, got {}",
                sx[0]
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        self.check_bn_affine(c, gamma, beta)?;
        let m = (n * h * w) as f64;
        let dx = self.value(x).data();
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let row = &dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for &v in row {
                    acc += v;
                }
            }
            let mu = acc / m;
            let mut vacc = 0.0;
            for ni in 0..n {
                let row = &dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for &v in row {
                    let d = v - mu;
                    vacc += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = vacc / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(dx, n, c, hw, &mean, &inv_std, gamma, beta);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_parts(sx, out),
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: true,
            },
        );
        Ok((v, stats))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::contract(format!(
                "batch norm expects rank 4, got {sx:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        self.check_bn_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract(format!(
                "running stats length {} vs {} channels",
                running_mean.len(),
                c
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let dx = self.value(x).data();
        let out = self.bn_apply(dx, n, c, h * w, running_mean, &inv_std, gamma, beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                train: false,
            },
        ))
    }

    fn check_bn_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch norm gamma"
                    } else {
                        "batch norm beta"
                    },
                    lhs: vec![c],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        dx: &[f64],
        n: usize,
        c: usize,
        hw: usize,
        mean: &[f64],
        inv_std: &[f64],
        gamma: Var,
        beta: Var,
    ) -> Vec<f64> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, gv, bv) = (mean[ci], inv_std[ci], g[ci], b[ci]);
                for p in 0..hw {
                    out[base + p] = gv * (dx[base + p] - mu) * is + bv;
                }
            }
        }
        out
    }

    // ---- pooling / reductions ----

    /// Max over the spatial grid: N×C×H×W → N×C. Ties break to the lowest
    /// row-major flat index.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::contract(format!("gmp expects rank 4, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let dx = self.value(x).data();
        let mut data = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for nc in 0..n * c {
            let row = &dx[nc * hw..(nc + 1) * hw];
            let mut best = 0;
            for (p, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = p;
                }
            }
            data[nc] = row[best];
            argmax[nc] = best;
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], data),
            ng,
            Op::GlobalMaxPool { x, argmax },
        ))
    }

    /// Mean over the spatial grid: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::contract(format!("gap expects rank 4, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let dx = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for nc in 0..n * c {
            let mut acc = 0.0;
            for &v in &dx[nc * hw..(nc + 1) * hw] {
                acc += v;
            }
            data[nc] = acc / hw as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], data), ng, Op::GlobalAvgPool(x)))
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "mean_axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let dx = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += dx[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut data {
            *v *= scale;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            ng,
            Op::MeanAxis { x, axis },
        ))
    }

    /// Sum of all elements → scalar of shape [1].
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for &v in self.value(x).data() {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(Tensor::from_parts(vec![1], vec![acc]), ng, Op::SumAll(x))
    }

    /// Per-image channel reweighting: x N×C×H×W scaled by w N×C.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw != [sx[0], sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![0.0; n * c * hw];
        for nc in 0..n * c {
            let s = dw[nc];
            for p in 0..hw {
                data[nc * hw + p] = dx[nc * hw + p] * s;
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::from_parts(sx, data), ng, Op::ScaleChannels { x, w }))
    }

    // ---- losses ----

    /// Mean softmax cross-entropy over the batch: logits N×J, labels in [0, J).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::contract(format!(
                "cross-entropy logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, j) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= j) {
            return Err(Error::contract(format!("label {bad} >= {j} classes")));
        }
        let dl = self.value(logits).data();
        let mut probs = vec![0.0; n * j];
        let mut total = 0.0;
        for i in 0..n {
            let row = &dl[i * j..(i + 1) * j];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (jj, &l) in row.iter().enumerate() {
                let e = (l - m).exp();
                probs[i * j + jj] = e;
                z += e;
            }
            for jj in 0..j {
                probs[i * j + jj] /= z;
            }
            total += -(row[labels[i]] - m - z.ln());
        }
        let out = Tensor::from_parts(vec![1], vec![total / n as f64]);
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            ng,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// KL divergence Σ t·log(t/p) of a fixed target against a predicted
    /// distribution. Zero-target entries contribute nothing; prediction
    /// entries are clamped below at `NORM_EPS` inside the log.
    pub fn kl_div(&mut self, target: &Tensor, pred: Var) -> Result<Var> {
        if target.shape() != self.value(pred).shape() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                lhs: target.shape().to_vec(),
                rhs: self.value(pred).shape().to_vec(),
            });
        }
        if target.data().iter().any(|&t| t < 0.0) {
            return Err(Error::contract("kl_div target has negative entries"));
        }
        let dp = self.value(pred).data();
        let mut acc = 0.0;
        for (&t, &p) in target.data().iter().zip(dp) {
            if t > 0.0 {
                acc += t * (t.ln() - p.max(NORM_EPS).ln());
            }
        }
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![acc]),
            ng,
            Op::KlDiv {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Cosine distance 1 − x·t/(‖x‖‖t‖+ε) of a variable against a fixed
    /// target vector. No gradient flows into the target.
    pub fn cosine_distance_to(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if target.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_distance",
                lhs: self.value(x).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let dx = self.value(x).data();
        let dt = target.data();
        let mut dot = 0.0;
        let mut nx2 = 0.0;
        let mut nt2 = 0.0;
        for (&a, &b) in dx.iter().zip(dt) {
            dot += a * b;
            nx2 += a * a;
            nt2 += b * b;
        }
        let denom = nx2.sqrt() * nt2.sqrt() + NORM_EPS;
        let out = Tensor::from_parts(vec![1], vec![1.0 - dot / denom]);
        let ng = self.needs(x);
        Ok(self.push(
            out,
            ng,
            Op::CosineToTarget {
                x,
                target: target.clone(),
            },
        ))
    }

    /// Divides by the ε-guarded sum of entries. Intended for non-negative
    /// inputs, where the sum is the L1 norm.
    pub fn l1_normalize(&mut self, x: Var) -> Var {
        let dx = self.value(x).data();
        let mut sum = 0.0;
        for &v in dx {
            sum += v;
        }
        let r = sum + NORM_EPS;
        let data = dx.iter().map(|&v| v / r).collect();
        let ng = self.needs(x);
        self.push(
            Tensor::from_parts(self.value(x).shape().to_vec(), data),
            ng,
            Op::L1Normalize(x),
        )
    }

    /// Scales each row of an N×d matrix to unit L2 norm. The divisor is
    /// clamped below at ε (rather than ε-shifted) so positive rescaling of a
    /// row rescales the output exactly.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "l2_normalize_rows expects rank 2, got {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let dx = self.value(x).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &dx[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            let r = norm.max(NORM_EPS);
            for jj in 0..d {
                data[i * d + jj] = row[jj] / r;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(s, data), ng, Op::L2NormalizeRows(x)))
    }

    // ---- backward ----

    /// Back-propagates from a scalar loss, consuming the tape. Every leaf
    /// registered with `requires_grad` receives a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar loss of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede node i, so split at i to borrow the
            // output gradient while mutating input gradients.
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("grad present");
            self.backward_node(i, g, lo);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients {
            grads,
            param_bindings: self.param_bindings,
        })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! sink {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = sink!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * db[k];
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * da[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = sink!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / db[k];
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * da[k] / (db[k] * db[k]);
                    }
                }
            }
            Op::Maximum(a, b) => {
                // Ties route to the first input.
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = sink!(*a) {
                    for k in 0..g.len() {
                        if da[k] >= db[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for k in 0..g.len() {
                        if db[k] > da[k] {
                            gb[k] += g[k];
                        }
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = sink!(*x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(gx) = sink!(*x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::Log(x) => {
                let dx = val(*x);
                if let Some(gx) = sink!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] / dx[k];
                    }
                }
            }
            Op::Relu(x) => {
                let dx = val(*x);
                if let Some(gx) = sink!(*x) {
                    for k in 0..g.len() {
                        if dx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = sink!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = sw[0];
                let hw = h * wd;
                let (dx, dw) = (val(*x), val(*w));
                if let Some(gx) = sink!(*x) {
                    for ni in 0..n {
                        for o in 0..co {
                            let grow = &g[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                            for ii in 0..ci {
                                let wv = dw[o * ci + ii];
                                if wv == 0.0 {
                                    continue;
                                }
                                let xrow = &mut gx[(ni * ci + ii) * hw..(ni * ci + ii + 1) * hw];
                                for p in 0..hw {
                                    xrow[p] += wv * grow[p];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for ni in 0..n {
                        for o in 0..co {
                            let grow = &g[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                            for ii in 0..ci {
                                let xrow = &dx[(ni * ci + ii) * hw..(ni * ci + ii + 1) * hw];
                                let mut acc = 0.0;
                                for p in 0..hw {
                                    acc += grow[p] * xrow[p];
                                }
                                gw[o * ci + ii] += acc;
                            }
                        }
                    }
                }
                if let Some(bias) = b {
                    if let Some(gb) = sink!(*bias) {
                        for ni in 0..n {
                            for o in 0..co {
                                let grow = &g[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                                let mut acc = 0.0;
                                for p in 0..hw {
                                    acc += grow[p];
                                }
                                gb[o] += acc;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let sx = self.nodes[x.0].value.shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let hw = h * w;
                let m = (n * hw) as f64;
                let dx = val(*x);
                let dgamma = val(*gamma);
                // Per-channel reductions of the incoming gradient.
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xh = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        for p in 0..hw {
                            let xh = (dx[base + p] - mu) * is;
                            sum_g[ci] += g[base + p];
                            sum_g_xh[ci] += g[base + p] * xh;
                        }
                    }
                }
                if let Some(gx) = sink!(*x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let (mu, is, gv) = (mean[ci], inv_std[ci], dgamma[ci]);
                            if *train {
                                for p in 0..hw {
                                    let xh = (dx[base + p] - mu) * is;
                                    gx[base + p] += gv * is
                                        * (g[base + p] - sum_g[ci] / m - xh * sum_g_xh[ci] / m);
                                }
                            } else {
                                for p in 0..hw {
                                    gx[base + p] += g[base + p] * gv * is;
                                }
                            }
                        }
                    }
                }
                if let Some(gg) = sink!(*gamma) {
                    for ci in 0..c {
                        gg[ci] += sum_g_xh[ci];
                    }
                }
                if let Some(gb) = sink!(*beta) {
                    for ci in 0..c {
                        gb[ci] += sum_g[ci];
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                let sx = self.nodes[x.0].value.shape();
                let hw = sx[2] * sx[3];
                if let Some(gx) = sink!(*x) {
                    for (nc, &p) in argmax.iter().enumerate() {
                        gx[nc * hw + p] += g[nc];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.nodes[x.0].value.shape();
                let hw = sx[2] * sx[3];
                let scale = 1.0 / hw as f64;
                if let Some(gx) = sink!(*x) {
                    for nc in 0..g.len() {
                        let gv = g[nc] * scale;
                        for p in 0..hw {
                            gx[nc * hw + p] += gv;
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, len, inner) = axis_blocks(shape, *axis);
                let scale = 1.0 / len as f64;
                if let Some(gx) = sink!(*x) {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for ii in 0..inner {
                                gx[base + ii] += g[o * inner + ii] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = sink!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = sink!(*a) {
                    for ii in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for jj in 0..nn {
                                acc += g[ii * nn + jj] * db[kk * nn + jj];
                            }
                            ga[ii * k + kk] += acc;
                        }
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for kk in 0..k {
                        for ii in 0..m {
                            let aik = da[ii * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for jj in 0..nn {
                                gb[kk * nn + jj] += aik * g[ii * nn + jj];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                if let Some(gx) = sink!(*x) {
                    for jj in 0..n {
                        for ii in 0..m {
                            gx[ii * n + jj] += g[jj * m + ii];
                        }
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_blocks(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = sink!(p) {
                        for o in 0..outer {
                            let src_base = (o * total + offset) * inner;
                            let dst_base = o * len * inner;
                            for q in 0..len * inner {
                                gp[dst_base + q] += g[src_base + q];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, axis_len, inner) = axis_blocks(shape, *axis);
                if let Some(gx) = sink!(*x) {
                    for o in 0..outer {
                        let dst_base = (o * axis_len + start) * inner;
                        let src_base = o * len * inner;
                        for q in 0..len * inner {
                            gx[dst_base + q] += g[src_base + q];
                        }
                    }
                }
            }
            Op::ScaleChannels { x, w } => {
                let sx = self.nodes[x.0].value.shape();
                let hw = sx[2] * sx[3];
                let (dx, dw) = (val(*x), val(*w));
                if let Some(gx) = sink!(*x) {
                    for nc in 0..dw.len() {
                        let s = dw[nc];
                        for p in 0..hw {
                            gx[nc * hw + p] += g[nc * hw + p] * s;
                        }
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for nc in 0..dw.len() {
                        let mut acc = 0.0;
                        for p in 0..hw {
                            acc += g[nc * hw + p] * dx[nc * hw + p];
                        }
                        gw[nc] += acc;
                    }
                }
            }
            Op::SpaceToDepth { x, block } => {
                let sx = self.nodes[x.0].value.shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let b = *block;
                let (oh, ow) = (h / b, w / b);
                let oc = c * b * b;
                if let Some(gx) = sink!(*x) {
                    for ni in 0..n {
                        for ic in 0..c {
                            for dy in 0..b {
                                for dxb in 0..b {
                                    let out_c = ic * b * b + dy * b + dxb;
                                    for y in 0..oh {
                                        for xcol in 0..ow {
                                            let src_idx = ((ni * oc + out_c) * oh + y) * ow + xcol;
                                            let dst_idx = ((ni * c + ic) * h + (y * b + dy)) * w
                                                + (xcol * b + dxb);
                                            gx[dst_idx] += g[src_idx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = sink!(*x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = sink!(*x) {
                    for (k, &idx) in indices.iter().enumerate() {
                        gx[idx] += g[k];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.nodes[logits.0].value.shape();
                let (n, j) = (s[0], s[1]);
                let scale = g[0] / n as f64;
                if let Some(gl) = sink!(*logits) {
                    for i in 0..n {
                        for jj in 0..j {
                            let onehot = if jj == labels[i] { 1.0 } else { 0.0 };
                            gl[i * j + jj] += scale * (probs[i * j + jj] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv { pred, target } => {
                let dp = val(*pred);
                let dt = target.data();
                if let Some(gp) = sink!(*pred) {
                    for k in 0..dp.len() {
                        if dt[k] > 0.0 && dp[k] > NORM_EPS {
                            gp[k] -= g[0] * dt[k] / dp[k];
                        }
                    }
                }
            }
            Op::CosineToTarget { x, target } => {
                let dx = val(*x);
                let dt = target.data();
                let mut dot = 0.0;
                let mut nx2 = 0.0;
                let mut nt2 = 0.0;
                for (&a, &b) in dx.iter().zip(dt) {
                    dot += a * b;
                    nx2 += a * a;
                    nt2 += b * b;
                }
                let nx = nx2.sqrt();
                let nt = nt2.sqrt();
                let denom = nx * nt + NORM_EPS;
                let nx_guard = nx.max(1e-300);
                if let Some(gx) = sink!(*x) {
                    for k in 0..dx.len() {
                        let dcos = dt[k] / denom - dot * nt * dx[k] / (nx_guard * denom * denom);
                        gx[k] -= g[0] * dcos;
                    }
                }
            }
            Op::L1Normalize(x) => {
                let dx = val(*x);
                let mut sum = 0.0;
                for &v in dx {
                    sum += v;
                }
                let r = sum + NORM_EPS;
                let y = node.value.data();
                let mut g_dot_y = 0.0;
                for k in 0..g.len() {
                    g_dot_y += g[k] * y[k];
                }
                if let Some(gx) = sink!(*x) {
                    for k in 0..g.len() {
                        gx[k] += (g[k] - g_dot_y) / r;
                    }
                }
            }
            Op::L2NormalizeRows(x) => {
                let s = self.nodes[x.0].value.shape();
                let (n, d) = (s[0], s[1]);
                let dx = val(*x);
                if let Some(gx) = sink!(*x) {
                    for i in 0..n {
                        let row = &dx[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        let r = norm.max(NORM_EPS);
                        let mut g_dot_x = 0.0;
                        for k in 0..d {
                            g_dot_x += grow[k] * row[k];
                        }
                        if norm > NORM_EPS {
                            for k in 0..d {
                                gx[i * d + k] += grow[k] / r - row[k] * g_dot_x / (norm * r * r);
                            }
                        } else {
                            // Clamped region: the divisor is constant.
                            for k in 0..d {
                                gx[i * d + k] += grow[k] / r;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
