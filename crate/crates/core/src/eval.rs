//! Cosine-similarity retrieval with Rank-1/CMC and mAP under the standard
//! protocol: gallery entries sharing both identity and camera with the query
//! are excluded, ranking ties break to the lower gallery index.

use serde::Serialize;

use crate::error::{Error, Result};

/// One embedded image with its identity and camera labels.
#[derive(Clone, Debug)]
pub struct RetrievalItem {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    /// Queries dropped because exclusion left them without a single match.
    pub excluded_queries: usize,
    pub evaluated_queries: usize,
}

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("similarity of a zero-norm embedding"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn evaluate(queries: &[RetrievalItem], gallery: &[RetrievalItem]) -> Result<Metrics> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::contract("evaluate with empty query or gallery set"));
    }
    let mut cmc_hits: Vec<usize> = Vec::new();
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for q in queries {
        // Same-identity-same-camera entries are junk under the protocol.
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].identity == q.identity && gallery[g].camera == q.camera))
            .collect();
        let matches = valid
            .iter()
            .filter(|&&g| gallery[g].identity == q.identity)
            .count();
        if matches == 0 {
            excluded += 1;
            continue;
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(valid.len());
        for &g in &valid {
            scored.push((similarity(&q.embedding, &gallery[g].embedding)?, g));
        }
        // Descending similarity, ties by ascending gallery index.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_match_rank = None;
        for (rank0, &(_, g)) in scored.iter().enumerate() {
            if gallery[g].identity == q.identity {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_match_rank.is_none() {
                    first_match_rank = Some(rank0);
                }
            }
        }
        ap_sum += precision_sum / matches as f64;
        let first = first_match_rank.expect("at least one match");
        if cmc_hits.len() < scored.len() {
            cmc_hits.resize(scored.len(), 0);
        }
        cmc_hits[first] += 1;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::contract(
            "every query was excluded; no valid matches anywhere",
        ));
    }
    let mut cmc = Vec::with_capacity(cmc_hits.len());
    let mut cum = 0usize;
    for &h in &cmc_hits {
        cum += h;
        cmc.push(cum as f64 / evaluated as f64);
    }
    Ok(Metrics {
        rank1: cmc[0],
        map: ap_sum / evaluated as f64,
        cmc,
        excluded_queries: excluded,
        evaluated_queries: evaluated,
    })
}
