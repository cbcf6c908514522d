//! Discrete-latent variational recurrent models of dialog.
//!
//! Each exchange `x_t` gets a one-hot latent state `z_t`. A state-level LSTM
//! carries the context `h_t`; the prior over `z_t` reads either `h_{t-1}`
//! (D-VRNN) or `z_{t-1}` (DD-VRNN), the posterior reads `[h_{t-1}, x_t]`, and
//! two LSTM decoders reconstruct the user and system utterances from
//! `[h_{t-1}, phi_z(z_t)]`. NE-D-VRNN is D-VRNN with named-entity tokens
//! up-weighted in the reconstruction loss.

mod config;
mod forward;
mod network;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;

pub use config::{ModelConfig, Variant};
pub use forward::{LatentMode, LossTerms, PassOptions};
pub use train::{train, train_model, validation_loss, EpochLog, TrainingLog};

use crate::corpus::{EncodedCorpus, EncodedDialog, EncodedExchange, Vocab};
use crate::error::{Error, Result};
use crate::features::{featurize_exchange, EmbeddingTable};
use crate::nn::{LstmState, Mode};
use crate::structure::{DialogAssignment, LatentAssignment, TransitionTable};
use crate::tape::{Gradients, ParamStore, Tape};
use crate::checkpoint::{self, Manifest};
use network::Network;

pub const PARAMS_FILE: &str = "params.bin";

/// Hidden and cell state of the state-level LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct VrnnState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl VrnnState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: Array1::zeros(hidden), c: Array1::zeros(hidden) }
    }
}

/// One Gumbel-Softmax draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    /// The relaxed sample, or its one-hot when drawn with `hard`.
    pub relaxed: Array1<f64>,
    pub hard_index: usize,
    pub posterior_probs: Array1<f64>,
}

/// Output of [`VrnnModel::decode_exchange`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub user_log_probs: Vec<f64>,
    pub system_log_probs: Vec<f64>,
    /// Last hidden state of `dec1`, which seeds `dec2`.
    pub dec1_last: Array1<f64>,
    pub dec2_last: Array1<f64>,
}

/// Relaxed sample `softmax((log p + g) / tau)` for given Gumbel noise `g`.
/// Probabilities are floored at `1e-10` before the log.
pub fn gumbel_relaxed(probs: &Array1<f64>, noise: &Array1<f64>, tau: f64) -> Array1<f64> {
    let scores: Array1<f64> = probs.iter().zip(noise).map(|(&p, &g)| (p.max(1e-10).ln() + g) / tau).collect();
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scores.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

pub fn sample_gumbel_softmax(probs: &Array1<f64>, tau: f64, hard: bool, rng: &mut impl Rng) -> Result<LatentSample> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (probs.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput("probabilities must form a simplex".into()));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid parameters");
    let noise = Array1::from_shape_fn(probs.len(), |_| gumbel.sample(rng));
    let relaxed = gumbel_relaxed(probs, &noise, tau);
    let hard_index = forward::argmax(relaxed.view());
    let relaxed = if hard { Array1::from_shape_fn(probs.len(), |i| if i == hard_index { 1.0 } else { 0.0 }) } else { relaxed };
    Ok(LatentSample { relaxed, hard_index, posterior_probs: probs.clone() })
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

fn first_row(a: &Array2<f64>) -> Array1<f64> {
    a.row(0).to_owned()
}

/// A VRNN with its vocabulary and parameters.
#[derive(Clone, Debug)]
pub struct VrnnModel {
    config: ModelConfig,
    vocab: Vocab,
    vocab_hash: String,
    store: ParamStore,
    net: Network,
    train_embeddings: bool,
}

impl VrnnModel {
    /// Freshly initialised model. Without `embeddings`, word vectors are
    /// drawn from U(-0.1, 0.1).
    pub fn new(config: ModelConfig, vocab: Vocab, embeddings: Option<EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = match embeddings {
            Some(t) => {
                if t.vocab_size() != vocab.len() || t.dim() != config.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding table is {}x{}, model needs {}x{}",
                        t.vocab_size(),
                        t.dim(),
                        vocab.len(),
                        config.embed_dim
                    )));
                }
                t
            }
            None => EmbeddingTable::random(vocab.len(), config.embed_dim, &mut rng),
        };
        let mut store = ParamStore::new();
        let net = Network::build(&config, &table, &mut store, &mut rng);
        let vocab_hash = vocab.hash();
        Ok(Self { config, vocab, vocab_hash, store, net, train_embeddings: table.trainable })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_states(&self) -> usize {
        self.config.n_states
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Current word embeddings.
    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable { matrix: self.store.get(self.net.embedding).clone(), trainable: self.train_embeddings }
    }

    pub(crate) fn embeddings_trainable(&self) -> bool {
        self.train_embeddings
    }

    pub(crate) fn embedding_param(&self) -> crate::tape::ParamId {
        self.net.embedding
    }

    fn check_corpus(&self, corpus: &EncodedCorpus) -> Result<()> {
        corpus.check_vocab(&self.vocab_hash)
    }

    fn require(&self, variants: &[Variant], what: &str) -> Result<()> {
        if variants.contains(&self.config.variant) {
            Ok(())
        } else {
            Err(Error::VariantMismatch { expected: what.to_string(), found: self.config.variant.name().to_string() })
        }
    }

    // ----- single-exchange operations -----

    /// `softmax(phi_prior(h_prev))`.
    pub fn prior_dvrnn(&self, h_prev: &VrnnState) -> Result<Array1<f64>> {
        self.require(&[Variant::Dvrnn, Variant::NeDvrnn], "dvrnn or ne_dvrnn")?;
        self.eval(|net, tape, mode| {
            let h = tape.input(row(&h_prev.h));
            let logits = net.prior_logits(tape, h, h, mode);
            tape.softmax(logits)
        })
    }

    /// `softmax(phi_prior(z_prev))` for a one-hot `z_prev`.
    pub fn prior_ddvrnn(&self, z_prev: &Array1<f64>) -> Result<Array1<f64>> {
        self.require(&[Variant::Ddvrnn], "ddvrnn")?;
        let ones = z_prev.iter().filter(|&&v| v == 1.0).count();
        let zeros = z_prev.iter().filter(|&&v| v == 0.0).count();
        if z_prev.len() != self.config.n_states || ones != 1 || ones + zeros != z_prev.len() {
            return Err(Error::InvalidInput(format!("prior_ddvrnn needs a one-hot vector of length {}", self.config.n_states)));
        }
        self.eval(|net, tape, mode| {
            let z = tape.input(row(z_prev));
            let logits = net.prior_logits(tape, z, z, mode);
            tape.softmax(logits)
        })
    }

    /// DD-VRNN prior at the first exchange, from the learned start vector.
    pub fn prior_ddvrnn_start(&self) -> Result<Array1<f64>> {
        self.require(&[Variant::Ddvrnn], "ddvrnn")?;
        self.eval(|net, tape, mode| {
            let z = net.start_rows(tape, 1).expect("ddvrnn has a start vector");
            let logits = net.prior_logits(tape, z, z, mode);
            tape.softmax(logits)
        })
    }

    /// Raw exchange feature `[mean user embedding, mean system embedding]`.
    pub fn exchange_feature(&self, exchange: &EncodedExchange) -> Result<Array1<f64>> {
        featurize_exchange(exchange, &self.embedding_table())
    }

    /// `softmax(phi_enc([h_prev, phi_x(x)]))`.
    pub fn posterior(&self, h_prev: &VrnnState, x_feat: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_feature(x_feat)?;
        self.eval(|net, tape, mode| {
            let h = tape.input(row(&h_prev.h));
            let raw = tape.input(row(x_feat));
            let x = net.phi_x.forward(tape, raw, mode);
            let logits = net.posterior_logits(tape, h, x, mode);
            tape.softmax(logits)
        })
    }

    fn check_feature(&self, x_feat: &Array1<f64>) -> Result<()> {
        if x_feat.len() != 2 * self.config.embed_dim {
            return Err(Error::InvalidInput(format!("exchange feature has length {}, expected {}", x_feat.len(), 2 * self.config.embed_dim)));
        }
        Ok(())
    }

    /// Teacher-forced log-probabilities of the target's user and system tokens.
    pub fn decode_exchange(&self, h_prev: &VrnnState, z: &Array1<f64>, target: &EncodedExchange) -> Result<DecodeOutput> {
        if z.len() != self.config.n_states {
            return Err(Error::InvalidInput(format!("latent has length {}, expected {}", z.len(), self.config.n_states)));
        }
        let store = &self.store;
        let mut tape = Tape::new(store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
        let h = tape.input(row(&h_prev.h));
        let zv = tape.input(row(z));
        let z_feat = self.net.phi_z.forward(&mut tape, zv, &mut mode);
        let user = [target.user.as_slice()];
        let user_ne = [target.user_ne.as_slice()];
        let system = [target.system.as_slice()];
        let system_ne = [target.system_ne.as_slice()];
        let (first, second) = self.net.decode_pair(&mut tape, h, z_feat, (&user, &user_ne), (&system, &system_ne), 1.0, &mut mode);
        Ok(DecodeOutput {
            user_log_probs: first.steps.iter().map(|&v| tape.scalar(v)).collect(),
            system_log_probs: second.steps.iter().map(|&v| tape.scalar(v)).collect(),
            dec1_last: first_row(tape.value(first.last)),
            dec2_last: first_row(tape.value(second.last)),
        })
    }

    /// `h_t = LSTM([phi_z(z), phi_x(x)], h_{t-1})`.
    pub fn recurrence(&self, h_prev: &VrnnState, x_feat: &Array1<f64>, z: &Array1<f64>) -> Result<VrnnState> {
        self.check_feature(x_feat)?;
        let store = &self.store;
        let mut tape = Tape::new(store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
        let raw = tape.input(row(x_feat));
        let x = self.net.phi_x.forward(&mut tape, raw, &mut mode);
        let zv = tape.input(row(z));
        let z_feat = self.net.phi_z.forward(&mut tape, zv, &mut mode);
        let h = tape.input(row(&h_prev.h));
        let c = tape.input(row(&h_prev.c));
        let next = self.net.recurrence(&mut tape, z_feat, x, LstmState { h, c }, &Array1::ones(1));
        Ok(VrnnState { h: first_row(tape.value(next.h)), c: first_row(tape.value(next.c)) })
    }

    fn eval(&self, f: impl FnOnce(&Network, &mut Tape, &mut Mode<'_, ChaCha8Rng>) -> crate::tape::Var) -> Result<Array1<f64>> {
        let mut tape = Tape::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
        let out = f(&self.net, &mut tape, &mut mode);
        Ok(first_row(tape.value(out)))
    }

    // ----- batched operations -----

    /// Loss components of one batch of dialogs.
    pub fn loss_terms(&self, dialogs: &[&EncodedDialog], options: &PassOptions, rng: &mut impl Rng) -> Result<LossTerms> {
        if dialogs.is_empty() {
            return Err(Error::InvalidInput("loss_terms needs a non-empty batch".into()));
        }
        let mut tape = Tape::new(&self.store);
        let mut mode = Mode { training: options.dropout, dropout: self.config.dropout, rng };
        let scored = forward::score(&self.net, &self.config, &mut tape, dialogs, options, &mut mode);
        Ok(forward::objective(&self.config, &mut tape, &scored).1)
    }

    /// Loss components and gradients of `total / batch size`.
    pub fn loss_and_gradients(&self, dialogs: &[&EncodedDialog], options: &PassOptions, rng: &mut impl Rng) -> Result<(LossTerms, Gradients)> {
        if dialogs.is_empty() {
            return Err(Error::InvalidInput("loss_and_gradients needs a non-empty batch".into()));
        }
        let mut tape = Tape::new(&self.store);
        let mut mode = Mode { training: options.dropout, dropout: self.config.dropout, rng };
        let scored = forward::score(&self.net, &self.config, &mut tape, dialogs, options, &mut mode);
        let (total, terms) = forward::objective(&self.config, &mut tape, &scored);
        let mean = tape.scale(total, 1.0 / dialogs.len() as f64);
        let mut grads = tape.backward(mean);
        if let Some(g) = grads.slot_mut(self.net.embedding).as_mut() {
            g.row_mut(Vocab::PAD_ID).fill(0.0);
        }
        Ok((terms, grads))
    }

    /// Argmax state and posterior of every exchange; no sampling.
    pub fn assign_states(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment> {
        self.check_corpus(corpus)?;
        let chunks: Vec<&[EncodedDialog]> = corpus.dialogs.chunks(self.config.batch_size.max(1)).collect();
        let parts: Vec<Vec<DialogAssignment>> = chunks
            .par_iter()
            .map(|chunk| {
                let refs: Vec<&EncodedDialog> = chunk.iter().collect();
                let mut tape = Tape::new(&self.store);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
                let enc = forward::encode(&self.net, &self.config, &mut tape, &refs, &LatentMode::Argmax, &mut mode);
                let log_q = tape.value(enc.log_q);
                let mut out: Vec<DialogAssignment> = refs
                    .iter()
                    .map(|d| DialogAssignment { dialog_id: d.dialog_id.clone(), states: Vec::new(), posteriors: Vec::new() })
                    .collect();
                for (r, &(i, _)) in enc.rows.iter().enumerate() {
                    let q: Vec<f64> = log_q.row(r).iter().map(|v| v.exp()).collect();
                    out[i].states.push(forward::argmax(log_q.row(r)));
                    out[i].posteriors.push(q);
                }
                out
            })
            .collect();
        Ok(LatentAssignment { n_states: self.config.n_states, dialogs: parts.into_iter().flatten().collect() })
    }

    /// Negative ELBO (reconstruction NLL plus per-exchange KL, no bag-of-words
    /// term) of every dialog under `num_samples` independent latent draws.
    /// Returns `[dialog][sample]`.
    pub fn neg_elbo_samples(&self, corpus: &EncodedCorpus, num_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_corpus(corpus)?;
        if num_samples == 0 {
            return Err(Error::InvalidInput("num_samples must be at least 1".into()));
        }
        let options = PassOptions::evaluation(&self.config);
        let chunks: Vec<(usize, &[EncodedDialog])> = corpus.dialogs.chunks(self.config.batch_size.max(1)).enumerate().collect();
        let parts: Vec<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|&(c, chunk)| {
                let refs: Vec<&EncodedDialog> = chunk.iter().collect();
                let mut per_dialog = vec![Vec::with_capacity(num_samples); refs.len()];
                for s in 0..num_samples {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((c * num_samples + s) as u64);
                    let mut tape = Tape::new(&self.store);
                    let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
                    let scored = forward::score(&self.net, &self.config, &mut tape, &refs, &options, &mut mode);
                    let recon = tape.value(scored.recon);
                    let kl = tape.value(scored.kl);
                    let mut sums = vec![0.0; refs.len()];
                    for (r, &(i, _)) in scored.enc.rows.iter().enumerate() {
                        sums[i] += recon[[r, 0]] + kl[[r, 0]];
                    }
                    for (i, v) in sums.into_iter().enumerate() {
                        per_dialog[i].push(v);
                    }
                }
                per_dialog
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }

    /// Per-dialog negative ELBO averaged over `num_samples` draws.
    pub fn dialog_nll(&self, corpus: &EncodedCorpus, num_samples: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self
            .neg_elbo_samples(corpus, num_samples, seed)?
            .into_iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect())
    }

    /// Log prior of given hard state sequences, summed per dialog, read from
    /// the full batched pass with the latents pinned to `states`.
    pub fn sequence_log_prior(&self, dialogs: &[&EncodedDialog], states: &[Vec<usize>]) -> Result<Vec<f64>> {
        if states.len() != dialogs.len() || dialogs.iter().zip(states).any(|(d, s)| d.exchanges.len() != s.len()) {
            return Err(Error::InvalidInput("one state per exchange is required".into()));
        }
        if states.iter().flatten().any(|&s| s >= self.config.n_states) {
            return Err(Error::InvalidInput(format!("state ids must be below {}", self.config.n_states)));
        }
        let mut tape = Tape::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
        let enc = forward::encode(&self.net, &self.config, &mut tape, dialogs, &LatentMode::Forced(states.to_vec()), &mut mode);
        let log_p = tape.value(enc.log_p);
        let mut out = vec![0.0; dialogs.len()];
        for (r, &(i, t)) in enc.rows.iter().enumerate() {
            out[i] += log_p[[r, states[i][t]]];
        }
        Ok(out)
    }

    /// DD-VRNN transition table: row `i` is the prior given state `i`.
    pub fn read_transition_table(&self, occupancy: Vec<u64>) -> Result<TransitionTable> {
        self.require(&[Variant::Ddvrnn], "ddvrnn")?;
        let n = self.config.n_states;
        if occupancy.len() != n {
            return Err(Error::InvalidInput(format!("occupancy has {} entries, expected {n}", occupancy.len())));
        }
        let mut tape = Tape::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, dropout: 0.0, rng: &mut rng };
        let eye = tape.input(Array2::eye(n));
        let logits = self.net.prior_logits(&mut tape, eye, eye, &mut mode);
        let probs = tape.softmax(logits);
        TransitionTable::new(tape.value(probs).clone(), occupancy, None)
    }

    pub fn manifest(&self, split_seed: Option<u64>) -> Result<Manifest> {
        Ok(Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            model: self.config.variant.name().to_string(),
            n_states: self.config.n_states,
            vocab_hash: self.vocab_hash.clone(),
            num_parameters: self.store.num_scalars(),
            config: serde_json::to_value(&self.config)?,
            split_seed,
        })
    }

    /// Writes `manifest.json`, `vocab.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path, split_seed: Option<u64>) -> Result<()> {
        checkpoint::write_common(dir, &self.manifest(split_seed)?, &self.vocab)?;
        let path = dir.join(PARAMS_FILE);
        std::fs::write(&path, self.store.to_blob()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let variant: Variant = manifest.model.parse()?;
        let config: ModelConfig = serde_json::from_value(manifest.config.clone())?;
        if config.variant != variant || config.n_states != manifest.n_states {
            return Err(Error::Config(format!("{}: manifest header disagrees with its config", dir.display())));
        }
        let vocab = checkpoint::read_vocab(dir, &manifest)?;
        let path = dir.join(PARAMS_FILE);
        let blob = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut model = Self::new(config, vocab, None)?;
        model.store.load_blob(&blob).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !model.store.all_finite() {
            return Err(Error::Config(format!("{}: non-finite parameters", path.display())));
        }
        Ok(model)
    }
}
