use ndarray::{Array1, Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedCorpus, EncodedDialog};
use crate::error::{Error, Result};
use crate::features::{featurize_exchange, EmbeddingTable};
use crate::structure::{DialogAssignment, LatentAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansModel {
    /// `k x d`.
    pub centroids: Array2<f64>,
    /// Cluster of every input point.
    pub assignments: Vec<usize>,
    /// Inertia after each Lloyd assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KmeansModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, point: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in self.centroids.rows().into_iter().enumerate() {
            let d = sq_dist(point, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    pub fn inertia(&self, points: &Array2<f64>) -> f64 {
        points.rows().into_iter().zip(&self.assignments).map(|(p, &c)| sq_dist(p, self.centroids.row(c))).sum()
    }
}

fn plus_plus_seeds(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every remaining point coincides with a centroid
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select(ndarray::Axis(0), &chosen)
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or `max_iters` is reached. A cluster that empties is re-seeded
/// with the point farthest from its current centroid.
pub fn kmeans_cluster(points: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KmeansModel> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k must lie in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = KmeansModel { centroids: plus_plus_seeds(points, k, &mut rng), assignments: vec![usize::MAX; n], inertia_history: Vec::new() };
    for _ in 0..max_iters.max(1) {
        let next: Vec<usize> = points.rows().into_iter().map(|p| model.nearest(p)).collect();
        let changed = next != model.assignments;
        model.assignments = next;
        loop {
            let mut counts = vec![0usize; k];
            for &c in &model.assignments {
                counts[c] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[model.assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(points.row(a), model.centroids.row(model.assignments[a]));
                    let db = sq_dist(points.row(b), model.centroids.row(model.assignments[b]));
                    da.total_cmp(&db)
                })
                .expect("k <= n leaves a cluster with two members");
            model.centroids.row_mut(empty).assign(&points.row(far));
            model.assignments[far] = empty;
        }
        model.inertia_history.push(model.inertia(points));
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(model.centroids.dim());
        let mut counts = vec![0usize; k];
        for (p, &c) in points.rows().into_iter().zip(&model.assignments) {
            let mut row = sums.row_mut(c);
            row += &p;
            counts[c] += 1;
        }
        for c in 0..k {
            let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
            model.centroids.row_mut(c).assign(&mean);
        }
        model.inertia_history.push(model.inertia(points));
    }
    Ok(model)
}

/// Exchange features of a whole corpus, one row per exchange in dialog order.
pub fn corpus_features(corpus: &EncodedCorpus, table: &EmbeddingTable) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = corpus.dialogs.iter().flat_map(|d| &d.exchanges).map(|ex| featurize_exchange(ex, table)).collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), 2 * table.dim()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// K-means over exchange features, usable as a structure model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansStructure {
    pub model: KmeansModel,
    pub table: EmbeddingTable,
    pub vocab_hash: String,
}

impl KmeansStructure {
    pub fn fit(corpus: &EncodedCorpus, table: EmbeddingTable, k: usize, seed: u64, max_iters: usize) -> Result<Self> {
        let features = corpus_features(corpus, &table)?;
        let model = kmeans_cluster(&features, k, seed, max_iters)?;
        Ok(Self { model, table, vocab_hash: corpus.vocab_hash.clone() })
    }

    /// Nearest-centroid cluster of every exchange; the posterior is one-hot.
    pub fn assign(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment> {
        corpus.check_vocab(&self.vocab_hash)?;
        let assign_dialog = |d: &EncodedDialog| -> Result<DialogAssignment> {
            let mut states = Vec::new();
            for ex in &d.exchanges {
                let f = featurize_exchange(ex, &self.table)?;
                states.push(self.model.nearest(f.view()));
            }
            let k = self.model.k();
            let posteriors = states.iter().map(|&s| (0..k).map(|i| if i == s { 1.0 } else { 0.0 }).collect()).collect();
            Ok(DialogAssignment { dialog_id: d.dialog_id.clone(), states, posteriors })
        };
        Ok(LatentAssignment { n_states: self.model.k(), dialogs: corpus.dialogs.iter().map(assign_dialog).collect::<Result<_>>()? })
    }
}
