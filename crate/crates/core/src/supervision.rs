//! Batch-level part-channel supervision.
//!
//! For every backbone channel c, the batch slices of that channel are grouped
//! by the region containing their maximum response; the group counts,
//! filtered and normalized, become row c of the supervision matrix whose
//! column k is the attention target for part k. Everything here works on
//! plain tensor data: the matrix is a per-batch target and carries no
//! gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform division of the feature rows into K disjoint bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub rows: usize,
    pub parts: usize,
    pub rows_per_part: usize,
}

impl RegionPartition {
    pub fn new(rows: usize, parts: usize) -> Result<Self> {
        if parts == 0 || rows == 0 || rows % parts != 0 {
            return Err(Error::config(format!(
                "cannot partition {rows} rows into {parts} equal bands"
            )));
        }
        Ok(RegionPartition {
            rows,
            parts,
            rows_per_part: rows / parts,
        })
    }

    pub fn region_of_row(&self, row: usize) -> usize {
        debug_assert!(row < self.rows);
        row / self.rows_per_part
    }

    /// Half-open row range of band k.
    pub fn row_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.rows_per_part..(k + 1) * self.rows_per_part
    }
}

/// How the per-channel relevance vector is post-processed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SupervisionVariant {
    /// Filtration then division by the maximum count.
    #[default]
    Standard,
    /// Filtration then a one-hot vector at the maximal count (ties to the
    /// lowest part index).
    OneHot,
    /// Division by the maximum count with the filtration branch skipped.
    NoFiltration,
}

/// C×K matrix of per-channel part relevance; column k is the attention
/// target for part k. Every entry lies in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMatrix {
    pub channels: usize,
    pub parts: usize,
    data: Vec<f64>,
}

impl SupervisionMatrix {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.parts..(c + 1) * self.parts]
    }

    /// Column k as a length-C tensor (the target Ĉᵏ).
    pub fn column(&self, k: usize) -> Tensor {
        let col: Vec<f64> = (0..self.channels)
            .map(|c| self.data[c * self.parts + k])
            .collect();
        Tensor::from_parts(vec![self.channels], col)
    }

    pub fn column_is_zero(&self, k: usize) -> bool {
        (0..self.channels).all(|c| self.data[c * self.parts + k] == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.channels, self.parts], self.data.clone())
    }

    /// Rows = channels, columns = parts.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("channel");
        for k in 0..self.parts {
            out.push_str(&format!(",part{k}"));
        }
        out.push('\n');
        for c in 0..self.channels {
            out.push_str(&c.to_string());
            for v in self.row(c) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Stacks channel c of every image: N×C×H×W → N×H×W.
pub fn stack_channel(t: &Tensor, c: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!(
            "stack_channel expects rank 4, got {s:?}"
        )));
    }
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    if c >= ch {
        return Err(Error::contract(format!(
            "channel {c} out of range for {ch} channels"
        )));
    }
    let hw = h * w;
    let mut data = vec![0.0; n * hw];
    for i in 0..n {
        let src = &t.data()[(i * ch + c) * hw..(i * ch + c + 1) * hw];
        data[i * hw..(i + 1) * hw].copy_from_slice(src);
    }
    Ok(Tensor::from_parts(vec![n, h, w], data))
}

/// Counts, per region, the batch slices of M_c whose maximum response falls
/// in that region. Ties in the maximum break to the lowest row-major flat
/// index, so an all-constant slice lands in the first region.
pub fn group_channels(m_c: &Tensor, partition: &RegionPartition) -> Result<Vec<usize>> {
    let s = m_c.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!(
            "group_channels expects rank 3, got {s:?}"
        )));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    if h != partition.rows {
        return Err(Error::contract(format!(
            "partition covers {} rows, map has {h}",
            partition.rows
        )));
    }
    let hw = h * w;
    let mut counts = vec![0usize; partition.parts];
    for i in 0..n {
        let slice = &m_c.data()[i * hw..(i + 1) * hw];
        let mut best = 0;
        for (p, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = p;
            }
        }
        counts[partition.region_of_row(best / w)] += 1;
    }
    Ok(counts)
}

/// Normalizes a count vector: all-zero when the maximum count is below
/// ⌊β·N⌋, otherwise division by the maximum (so the largest entry is 1).
pub fn normalize_relevance(counts: &[usize], n: usize, beta: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("normalize_relevance with empty batch"));
    }
    if !(0.0 < beta && beta <= 1.0) {
        return Err(Error::contract(format!("beta {beta} outside (0, 1]")));
    }
    let total: usize = counts.iter().sum();
    if total != n {
        return Err(Error::contract(format!(
            "counts sum to {total}, batch size is {n}"
        )));
    }
    let max = *counts.iter().max().unwrap_or(&0);
    let threshold = (beta * n as f64).floor() as usize;
    if max < threshold {
        return Ok(vec![0.0; counts.len()]);
    }
    Ok(counts.iter().map(|&v| v as f64 / max as f64).collect())
}

/// Runs the full pipeline over every channel of a feature batch.
pub fn estimate_supervision(
    t: &Tensor,
    parts: usize,
    beta: f64,
    variant: SupervisionVariant,
) -> Result<SupervisionMatrix> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!(
            "estimate_supervision expects rank 4, got {s:?}"
        )));
    }
    let (n, channels, h, _) = (s[0], s[1], s[2], s[3]);
    let partition = RegionPartition::new(h, parts)?;
    let mut data = Vec::with_capacity(channels * parts);
    for c in 0..channels {
        let m_c = stack_channel(t, c)?;
        let counts = group_channels(&m_c, &partition)?;
        let row = match variant {
            SupervisionVariant::Standard => normalize_relevance(&counts, n, beta)?,
            SupervisionVariant::NoFiltration => {
                let max = *counts.iter().max().unwrap_or(&0);
                counts.iter().map(|&v| v as f64 / max as f64).collect()
            }
            SupervisionVariant::OneHot => {
                let filtered = normalize_relevance(&counts, n, beta)?;
                if filtered.iter().all(|&v| v == 0.0) {
                    filtered
                } else {
                    let mut best = 0;
                    for (k, &v) in counts.iter().enumerate() {
                        if v > counts[best] {
                            best = k;
                        }
                    }
                    let mut row = vec![0.0; parts];
                    row[best] = 1.0;
                    row
                }
            }
        };
        data.extend_from_slice(&row);
    }
    Ok(SupervisionMatrix {
        channels,
        parts,
        data,
    })
}
