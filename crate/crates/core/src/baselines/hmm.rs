//! Multinomial-emission HMM over exchanges. Each exchange is one observation:
//! the bag of its user and system tokens, scored as the product of per-token
//! emission probabilities of the hidden state.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedCorpus, EncodedDialog};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmConfig {
    pub n_states: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once an iteration improves the log-likelihood by less than this.
    pub tol: f64,
    /// Additive pseudo-count applied to the emission counts after training.
    pub smoothing: f64,
}

impl HmmConfig {
    pub fn new(n_states: usize) -> Self {
        Self { n_states, seed: 0, max_iters: 100, tol: 1e-4, smoothing: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub n_states: usize,
    pub initial: Array1<f64>,
    pub transition: Array2<f64>,
    /// `n_states x vocab_size`, each row a distribution over tokens.
    pub emission: Array2<f64>,
    pub vocab_hash: String,
}

/// Result of [`train_hmm`]: the smoothed model and the log-likelihood of
/// the training data at the start of every EM iteration, plus a final entry
/// for the last unsmoothed parameters.
#[derive(Clone, Debug)]
pub struct HmmFit {
    pub model: HmmModel,
    pub log_likelihoods: Vec<f64>,
}

struct Posteriors {
    log_likelihood: f64,
    /// `T x N` state marginals.
    gamma: Array2<f64>,
    /// Sum over `t` of the pairwise marginals, `N x N`.
    xi: Array2<f64>,
}

fn row_normalise(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            let n = row.len() as f64;
            row.fill(1.0 / n);
        }
    }
}

impl HmmModel {
    pub fn vocab_size(&self) -> usize {
        self.emission.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        if self.initial.len() != n || self.transition.dim() != (n, n) || self.emission.nrows() != n {
            return Err(Error::Config("HMM parameter shapes disagree with n_states".into()));
        }
        let ok = |v: ndarray::ArrayView1<f64>| v.iter().all(|&x| x >= 0.0) && (v.sum() - 1.0).abs() <= 1e-9;
        if !ok(self.initial.view()) || !self.transition.rows().into_iter().all(ok) || !self.emission.rows().into_iter().all(ok) {
            return Err(Error::Config("HMM distributions must each sum to 1".into()));
        }
        Ok(())
    }

    /// `T x N` log emission probability of every exchange under every state.
    fn log_emissions(&self, dialog: &EncodedDialog) -> Result<Array2<f64>> {
        let log_b = self.emission.mapv(f64::ln);
        let mut out = Array2::zeros((dialog.exchanges.len(), self.n_states));
        for (t, ex) in dialog.exchanges.iter().enumerate() {
            for tok in ex.all_tokens() {
                if tok >= self.vocab_size() {
                    return Err(Error::InvalidInput(format!("token id {tok} outside the HMM vocabulary of {}", self.vocab_size())));
                }
                for s in 0..self.n_states {
                    out[[t, s]] += log_b[[s, tok]];
                }
            }
        }
        Ok(out)
    }

    /// Scaled forward-backward pass.
    fn posteriors(&self, dialog: &EncodedDialog, need_marginals: bool) -> Result<Posteriors> {
        let n = self.n_states;
        let log_e = self.log_emissions(dialog)?;
        let steps = log_e.nrows();
        let mut alpha = Array2::zeros((steps, n));
        let mut emit = Array2::zeros((steps, n));
        let mut scale = vec![0.0; steps];
        let mut log_likelihood = 0.0;
        for t in 0..steps {
            let shift = log_e.row(t).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !shift.is_finite() {
                return Ok(Posteriors { log_likelihood: f64::NEG_INFINITY, gamma: Array2::zeros((steps, n)), xi: Array2::zeros((n, n)) });
            }
            emit.row_mut(t).assign(&log_e.row(t).mapv(|v| (v - shift).exp()));
            let prior: Array1<f64> = if t == 0 { self.initial.clone() } else { alpha.row(t - 1).dot(&self.transition) };
            let a = &prior * &emit.row(t);
            let c = a.sum();
            if !(c > 0.0) {
                return Ok(Posteriors { log_likelihood: f64::NEG_INFINITY, gamma: Array2::zeros((steps, n)), xi: Array2::zeros((n, n)) });
            }
            alpha.row_mut(t).assign(&(a / c));
            scale[t] = c;
            log_likelihood += c.ln() + shift;
        }
        if !need_marginals {
            return Ok(Posteriors { log_likelihood, gamma: Array2::zeros((0, n)), xi: Array2::zeros((n, n)) });
        }
        let mut beta = Array2::ones((steps, n));
        for t in (0..steps.saturating_sub(1)).rev() {
            let next = &beta.row(t + 1) * &emit.row(t + 1);
            let b = self.transition.dot(&next) / scale[t + 1];
            beta.row_mut(t).assign(&b);
        }
        let gamma = &alpha * &beta;
        let mut xi = Array2::zeros((n, n));
        for t in 1..steps {
            let right = &beta.row(t) * &emit.row(t);
            for i in 0..n {
                for j in 0..n {
                    xi[[i, j]] += alpha[[t - 1, i]] * self.transition[[i, j]] * right[j] / scale[t];
                }
            }
        }
        Ok(Posteriors { log_likelihood, gamma, xi })
    }

    /// Exact log-likelihood of one dialog.
    pub fn log_likelihood(&self, dialog: &EncodedDialog) -> Result<f64> {
        Ok(self.posteriors(dialog, false)?.log_likelihood)
    }

    /// Most likely state of each exchange under the smoothed posterior marginals.
    pub fn posterior_states(&self, dialog: &EncodedDialog) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let p = self.posteriors(dialog, true)?;
        let mut states = Vec::new();
        let mut probs = Vec::new();
        for row in p.gamma.rows() {
            let s = row.sum();
            let q: Vec<f64> = row.iter().map(|v| v / s).collect();
            states.push((0..q.len()).fold(0, |b, i| if q[i] > q[b] { i } else { b }));
            probs.push(q);
        }
        Ok((states, probs))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let model: HmmModel = crate::checkpoint::read_json(path)?;
        model.validate()?;
        Ok(model)
    }
}

/// Baum-Welch EM from a randomised start. The smoothing pseudo-count is added
/// only after the last iteration so the EM log-likelihood sequence stays
/// monotone.
pub fn train_hmm(corpus: &EncodedCorpus, vocab_size: usize, config: &HmmConfig) -> Result<HmmFit> {
    if corpus.dialogs.iter().all(|d| d.exchanges.is_empty()) {
        return Err(Error::InvalidInput("cannot train an HMM on an empty corpus".into()));
    }
    if config.n_states == 0 {
        return Err(Error::Config("n_states: must be at least 1".into()));
    }
    if !(config.smoothing >= 0.0) {
        return Err(Error::Config("smoothing: must be non-negative".into()));
    }
    let n = config.n_states;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut unigram = Array1::<f64>::zeros(vocab_size);
    for d in &corpus.dialogs {
        for ex in &d.exchanges {
            for tok in ex.all_tokens() {
                if tok >= vocab_size {
                    return Err(Error::InvalidInput(format!("token id {tok} outside vocabulary of {vocab_size}")));
                }
                unigram[tok] += 1.0;
            }
        }
    }
    let mut emission = Array2::from_shape_fn((n, vocab_size), |(_, w)| unigram[w] * rng.gen_range(0.5..1.5));
    row_normalise(&mut emission);
    let mut transition = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.5..1.5));
    row_normalise(&mut transition);
    let mut model = HmmModel {
        n_states: n,
        initial: Array1::from_elem(n, 1.0 / n as f64),
        transition,
        emission,
        vocab_hash: corpus.vocab_hash.clone(),
    };

    let mut history = Vec::new();
    let mut emission_counts = Array2::zeros((n, vocab_size));
    for _ in 0..config.max_iters {
        let mut ll = 0.0;
        let mut init = Array1::<f64>::zeros(n);
        let mut trans = Array2::<f64>::zeros((n, n));
        emission_counts = Array2::zeros((n, vocab_size));
        for d in &corpus.dialogs {
            if d.exchanges.is_empty() {
                continue;
            }
            let p = model.posteriors(d, true)?;
            ll += p.log_likelihood;
            init += &p.gamma.row(0);
            trans += &p.xi;
            for (t, ex) in d.exchanges.iter().enumerate() {
                for tok in ex.all_tokens() {
                    let mut col = emission_counts.column_mut(tok);
                    col += &p.gamma.row(t);
                }
            }
        }
        let improved = history.last().map_or(f64::INFINITY, |&prev| ll - prev);
        history.push(ll);
        model.initial = &init / init.sum();
        trans.mapv_inplace(|v| v.max(0.0));
        row_normalise(&mut trans);
        model.transition = trans;
        let mut e = emission_counts.clone();
        row_normalise(&mut e);
        model.emission = e;
        if improved < config.tol {
            break;
        }
    }
    let final_ll: f64 = corpus.dialogs.iter().filter(|d| !d.exchanges.is_empty()).map(|d| model.log_likelihood(d)).sum::<Result<f64>>()?;
    history.push(final_ll);

    if config.smoothing > 0.0 {
        let mut smoothed = emission_counts.mapv(|c| c + config.smoothing);
        row_normalise(&mut smoothed);
        model.emission = smoothed;
    }
    Ok(HmmFit { model, log_likelihoods: history })
}

/// Per-dialog negative log-likelihood.
pub fn hmm_nll(model: &HmmModel, corpus: &EncodedCorpus) -> Result<Vec<f64>> {
    corpus.check_vocab(&model.vocab_hash)?;
    corpus.dialogs.iter().map(|d| model.log_likelihood(d).map(|ll| -ll)).collect()
}
