//! Batch construction and the training objective: per-part cross-entropy,
//! batch-hard triplet loss over the holistic embedding, and the weighted
//! total.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A P-identities × A-images training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    /// Dataset image indices, grouped by identity: P·A entries.
    pub image_indices: Vec<usize>,
    /// Class label (identity index) per batch position.
    pub labels: Vec<usize>,
    pub p: usize,
    pub a: usize,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.p * self.a
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples P identities without replacement and A images from each; an
/// identity with fewer than A images is sampled with replacement.
///
/// `identity_images[label]` lists the dataset indices of that identity.
pub fn sample_pk(
    identity_images: &[Vec<usize>],
    p: usize,
    a: usize,
    rng: &mut impl Rng,
) -> Result<PkBatch> {
    if p < 1 || a < 1 {
        return Err(Error::config(format!("degenerate batch shape P={p}, A={a}")));
    }
    let available: Vec<usize> = (0..identity_images.len())
        .filter(|&i| !identity_images[i].is_empty())
        .collect();
    if available.len() < p {
        return Err(Error::config(format!(
            "need {p} identities with images, dataset has {}",
            available.len()
        )));
    }
    let mut pool = available;
    pool.shuffle(rng);
    pool.truncate(p);
    let mut image_indices = Vec::with_capacity(p * a);
    let mut labels = Vec::with_capacity(p * a);
    for &id in &pool {
        let images = &identity_images[id];
        if images.len() >= a {
            let mut picks = images.clone();
            picks.shuffle(rng);
            picks.truncate(a);
            image_indices.extend_from_slice(&picks);
        } else {
            for _ in 0..a {
                image_indices.push(images[rng.gen_range(0..images.len())]);
            }
        }
        labels.extend(std::iter::repeat(id).take(a));
    }
    Ok(PkBatch {
        image_indices,
        labels,
        p,
        a,
    })
}

/// Mean softmax cross-entropy of one part's logits.
pub fn cross_entropy_part(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Batch-hard triplet loss on the holistic embeddings under cosine distance.
///
/// For each anchor, the hardest positive is the farthest same-identity
/// embedding (the anchor itself is a candidate, at distance zero) and the
/// hardest negative the closest other-identity embedding; the hinged margins
/// are averaged over the anchors that violate the constraint. Returns zero
/// when no anchor violates it.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let shape = tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "triplet embeddings {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let n = shape[0];
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::config(
            "triplet loss needs at least two identities in the batch",
        ));
    }

    let normalized = tape.l2_normalize_rows(embeddings)?;
    let normalized_t = tape.transpose(normalized)?;
    let sim = tape.matmul(normalized, normalized_t)?;
    let neg_sim = tape.mul_scalar(sim, -1.0);
    let dist = tape.add_scalar(neg_sim, 1.0); // D = 1 - cos

    // Hardest positive / negative selection happens on forward values; the
    // gradient then flows through the selected matrix entries only.
    let d = tape.value(dist).data().to_vec();
    let mut picks = Vec::with_capacity(2 * n);
    for anchor in 0..n {
        let row = &d[anchor * n..(anchor + 1) * n];
        let mut hardest_pos = None::<usize>;
        let mut hardest_neg = None::<usize>;
        for (j, &dj) in row.iter().enumerate() {
            if labels[j] == labels[anchor] {
                if hardest_pos.map_or(true, |best| dj > row[best]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.map_or(true, |best| dj < row[best]) {
                hardest_neg = Some(j);
            }
        }
        let pos = hardest_pos.expect("anchor is its own positive");
        let neg = hardest_neg.expect("other identities exist");
        picks.push(anchor * n + pos);
        picks.push(anchor * n + neg);
    }
    let violations = (0..n)
        .filter(|&anchor| d[picks[2 * anchor]] - d[picks[2 * anchor + 1]] + margin > 0.0)
        .count();
    if violations == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }

    let pos_idx: Vec<usize> = (0..n).map(|i| picks[2 * i]).collect();
    let neg_idx: Vec<usize> = (0..n).map(|i| picks[2 * i + 1]).collect();
    let pos_d = tape.gather(dist, pos_idx)?;
    let neg_d = tape.gather(dist, neg_idx)?;
    let diff = tape.sub(pos_d, neg_d)?;
    let with_margin = tape.add_scalar(diff, margin);
    let hinged = tape.relu(with_margin);
    let total = tape.sum_all(hinged);
    Ok(tape.mul_scalar(total, 1.0 / violations as f64))
}

/// All loss terms of one training step. Disabled mechanisms simply leave
/// their slot empty and contribute exactly zero.
#[derive(Default)]
pub struct LossTerms {
    pub part_id: Vec<Var>,
    pub triplet: Option<Var>,
    pub attention: Vec<Var>,
    pub part_reg: Vec<Var>,
    pub holistic_reg: Option<Var>,
    pub stripe_id: Vec<Var>,
}

/// L = Σ L_id + L_tp + λ₁ Σ L_C + λ₂ (L_h + Σ L_p) + stripe cross-entropies.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, lambda1: f64, lambda2: f64) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &t in &terms.part_id {
        acc = tape.add(acc, t)?;
    }
    if let Some(tp) = terms.triplet {
        acc = tape.add(acc, tp)?;
    }
    if !terms.attention.is_empty() {
        let mut c = terms.attention[0];
        for &t in &terms.attention[1..] {
            c = tape.add(c, t)?;
        }
        let weighted = tape.mul_scalar(c, lambda1);
        acc = tape.add(acc, weighted)?;
    }
    let mut spatial: Option<Var> = terms.holistic_reg;
    for &t in &terms.part_reg {
        spatial = Some(match spatial {
            Some(s) => tape.add(s, t)?,
            None => t,
        });
    }
    if let Some(s) = spatial {
        let weighted = tape.mul_scalar(s, lambda2);
        acc = tape.add(acc, weighted)?;
    }
    for &t in &terms.stripe_id {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
