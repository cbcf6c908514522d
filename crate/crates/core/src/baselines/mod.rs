//! Comparison models: a multinomial HMM for held-out likelihood and K-means
//! over exchange features for clustering quality.

pub mod hmm;
pub mod kmeans;

pub use hmm::{hmm_nll, train_hmm, HmmConfig, HmmFit, HmmModel};
pub use kmeans::{corpus_features, kmeans_cluster, KmeansModel, KmeansStructure};

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedCorpus;
use crate::error::{Error, Result};
use crate::structure::LatentAssignment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// The exchange's own user and system tokens.
    CurrentUtterance,
    /// Tokens of every exchange before it in the same dialog.
    Context,
}

/// Raw term-frequency vector of every exchange, grouped by dialog.
pub fn bow_vectors(corpus: &EncodedCorpus, vocab_size: usize, mode: CosineMode) -> Vec<Vec<Vec<f64>>> {
    corpus
        .dialogs
        .iter()
        .map(|d| {
            let mut running = vec![0.0; vocab_size];
            let mut out = Vec::with_capacity(d.exchanges.len());
            for ex in &d.exchanges {
                let mut own = vec![0.0; vocab_size];
                for tok in ex.all_tokens() {
                    own[tok] += 1.0;
                }
                match mode {
                    CosineMode::CurrentUtterance => out.push(own.clone()),
                    CosineMode::Context => out.push(running.clone()),
                }
                running.iter_mut().zip(&own).for_each(|(r, o)| *r += o);
            }
            out
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity inside each cluster, averaged over
/// clusters weighted by size. Zero vectors (the empty context of an opening
/// exchange) are left out, and clusters with fewer than two remaining
/// members contribute nothing.
pub fn within_cluster_cosine(assignment: &LatentAssignment, vectors: &[Vec<Vec<f64>>]) -> Result<f64> {
    if assignment.dialogs.len() != vectors.len() || assignment.dialogs.iter().zip(vectors).any(|(a, v)| a.states.len() != v.len()) {
        return Err(Error::InvalidInput("assignment and vectors cover different exchanges".into()));
    }
    let mut clusters: Vec<Vec<&[f64]>> = vec![Vec::new(); assignment.n_states];
    for (a, v) in assignment.dialogs.iter().zip(vectors) {
        for (&s, vec) in a.states.iter().zip(v) {
            if s >= assignment.n_states {
                return Err(Error::InvalidInput(format!("state {s} outside 0..{}", assignment.n_states)));
            }
            if vec.iter().any(|&x| x != 0.0) {
                clusters[s].push(vec);
            }
        }
    }
    let mut weighted = 0.0;
    let mut total = 0usize;
    for members in clusters.iter().filter(|m| m.len() >= 2) {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                sum += cosine(members[i], members[j]);
                pairs += 1;
            }
        }
        weighted += members.len() as f64 * sum / pairs as f64;
        total += members.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("no cluster has two or more members".into()));
    }
    Ok(weighted / total as f64)
}

#[cfg(test)]
mod tests;
